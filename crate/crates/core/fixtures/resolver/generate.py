"""Writes the synthetic metadata responses replayed by the resolver tests.

Bodies follow the layout of ENA filereport TSV and NCBI E-utilities
JSON/XML responses. Run ids, sizes and checksums are generated, not real.
Re-running produces identical files.
"""
import hashlib
import random

ENA = ("https://www.ebi.ac.uk/ena/portal/api/filereport?accession={acc}"
       "&result=read_run&fields=run_accession,fastq_ftp,fastq_bytes,fastq_md5&format=tsv")
EUTILS = "https://eutils.ncbi.nlm.nih.gov/entrez/eutils"
ESEARCH = EUTILS + "/esearch.fcgi?db=sra&term={acc}&retmax=10000&retmode=json"
EFETCH = EUTILS + "/efetch.fcgi?db=sra&id={ids}&rettype=full&retmode=xml"
HEADER = "run_accession\tfastq_ftp\tfastq_bytes\tfastq_md5\n"

# project, first synthetic run number, runs, files per run
PROJECTS = [
    ("PRJNA762469", 9100101, 10, 2),
    ("PRJNA540705", 9100201, 6, 1),
    ("PRJNA400087", 9100301, 43, 1),
]


def md5(text):
    return hashlib.md5(text.encode()).hexdigest()


def ftp_path(run, suffix):
    return f"ftp.sra.ebi.ac.uk/vol1/fastq/{run[:6]}/{run[-3:]:0>3}/{run}/{run}{suffix}.fastq.gz"


def main():
    rng = random.Random(20240101)
    index = []
    for project, first, runs, files in PROJECTS:
        rows = []
        for n in range(first, first + runs):
            run = f"SRR{n}"
            suffixes = ["_1", "_2"] if files == 2 else [""]
            urls = [ftp_path(run, s) for s in suffixes]
            sizes = [str(rng.randint(200_000_000, 3_000_000_000)) for _ in suffixes]
            sums = [md5(u) for u in urls]
            rows.append(f"{run}\t{';'.join(urls)}\t{';'.join(sizes)}\t{';'.join(sums)}\n")
        name = f"ena_{project}.tsv"
        with open(name, "w") as f:
            f.write(HEADER + "".join(rows))
        index.append((ENA.format(acc=project), name, None))

    # A run only NCBI knows about.
    index.append((ENA.format(acc="SRR9100901"), "empty.txt", 204))
    with open("esearch_SRR9100901.json", "w") as f:
        f.write('{"header":{"type":"esearch","version":"0.3"},"esearchresult":'
                '{"count":"1","retmax":"1","retstart":"0","idlist":["91009010"]}}\n')
    index.append((ESEARCH.format(acc="SRR9100901"), "esearch_SRR9100901.json", None))
    with open("efetch_91009010.xml", "w") as f:
        f.write(f"""<?xml version="1.0" encoding="UTF-8" ?>
<EXPERIMENT_PACKAGE_SET>
<EXPERIMENT_PACKAGE>
<RUN_SET>
<RUN accession="SRR9100901" total_spots="1250000" total_bases="250000000" size="98000000" published="2021-09-01 00:00:00">
<SRAFiles>
<SRAFile cluster="public" filename="SRR9100901" url="https://sra-downloadb.be-md.ncbi.nlm.nih.gov/sos5/sra-pub-zq-11/SRR009/100/SRR9100901/SRR9100901.1" size="98000000" date="2021-09-01 00:00:00" md5="{md5('SRR9100901.normalized')}" semantic_name="SRA Normalized" supertype="Primary ETL" sratoolkit="1"/>
<SRAFile cluster="public" filename="SRR9100901.lite" size="61000000" date="2021-09-01 00:00:00" md5="{md5('SRR9100901.lite')}" semantic_name="SRA Lite" supertype="Primary ETL" sratoolkit="1">
<Alternatives url="https://sra-downloadb.be-md.ncbi.nlm.nih.gov/sos5/sra-pub-zq-11/SRR009/100/SRR9100901/SRR9100901.lite.1" free_egress="worldwide" access_type="anonymous" org="NCBI"/>
</SRAFile>
</SRAFiles>
</RUN>
</RUN_SET>
</EXPERIMENT_PACKAGE>
</EXPERIMENT_PACKAGE_SET>
""")
    index.append((EFETCH.format(ids="91009010"), "efetch_91009010.xml", None))

    # Known to neither source.
    index.append((ENA.format(acc="SRR9100999"), "empty.txt", 204))
    with open("esearch_SRR9100999.json", "w") as f:
        f.write('{"header":{"type":"esearch","version":"0.3"},"esearchresult":'
                '{"count":"0","retmax":"0","retstart":"0","idlist":[]}}\n')
    index.append((ESEARCH.format(acc="SRR9100999"), "esearch_SRR9100999.json", None))
    open("empty.txt", "w").close()

    with open("index.tsv", "w") as f:
        f.write("# url\tbody file\t[status, default 200]\n")
        for url, name, status in index:
            f.write(f"{url}\t{name}" + (f"\t{status}" if status else "") + "\n")


if __name__ == "__main__":
    main()
