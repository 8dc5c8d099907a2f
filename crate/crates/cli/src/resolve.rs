use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use clap::Args;
use genodl::resolver::{
    parse_accession_list, to_tsv, Accession, FixtureTransport, HttpTransport, Resolver, ResolverConfig, RunRecord,
};

use crate::report::Unresolved;
use crate::{CliError, CliResult, MetadataArgs};

#[derive(Args, Debug)]
pub struct ResolveArgs {
    #[command(flatten)]
    metadata: MetadataArgs,
}

/// Reads and de-duplicates the accession list, keeping first occurrences.
pub fn read_accessions(path: &Path) -> Result<Vec<Accession>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read accession list {}: {e}", path.display())))?;
    let list = parse_accession_list(&text).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut seen = HashSet::new();
    Ok(list.into_iter().filter(|a| seen.insert(a.clone())).collect())
}

/// Resolves every accession, in input order. Runs reachable through more
/// than one accession (a project and one of its runs) are listed once.
pub fn resolve_accessions(
    accessions: &[Accession],
    fixtures: Option<&Path>,
) -> Result<(Vec<RunRecord>, Vec<Unresolved>), CliError> {
    if accessions.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let results = match fixtures {
        Some(dir) => {
            let transport = FixtureTransport::open(dir)
                .map_err(|e| CliError::Usage(format!("cannot open fixtures {}: {e}", dir.display())))?;
            Resolver::new(transport, ResolverConfig::default()).resolve_all(accessions)
        }
        None => Resolver::new(HttpTransport::default(), ResolverConfig::default()).resolve_all(accessions),
    };

    let mut records = Vec::new();
    let mut unresolved = Vec::new();
    let mut seen = HashSet::new();
    for (acc, result) in accessions.iter().zip(results) {
        match result {
            Ok((source, runs)) => {
                log::info!("{}: {} run(s) from {source:?}", acc.as_str(), runs.len());
                records.extend(runs.into_iter().filter(|r| seen.insert(r.run_accession.clone())));
            }
            Err(e) => unresolved.push(Unresolved { accession: acc.as_str().to_owned(), error: e.to_string() }),
        }
    }
    Ok((records, unresolved))
}

pub fn run(args: ResolveArgs) -> CliResult {
    let path = args.metadata.accessions.as_deref().ok_or_else(|| CliError::Usage("--accessions is required".into()))?;
    let accessions = read_accessions(path)?;
    let (records, unresolved) = resolve_accessions(&accessions, args.metadata.fixtures.as_deref())?;
    if !records.is_empty() {
        std::io::stdout()
            .lock()
            .write_all(to_tsv(&records).as_bytes())
            .map_err(|e| CliError::Failed(format!("writing output: {e}")))?;
    }
    for u in &unresolved {
        eprintln!("{}\t{}", u.accession, u.error);
    }
    if unresolved.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("{} accession(s) could not be resolved", unresolved.len())))
    }
}
