use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use md5::{Digest, Md5};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixtureFile {
    pub name: String,
    pub size: u64,
    pub md5: String,
}

/// Writes `size` pseudo-random bytes drawn from `seed` and returns their MD5.
pub fn write_random_file(path: &Path, size: u64, seed: u64) -> io::Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BufWriter::new(File::create(path)?);
    let mut hasher = Md5::new();
    let mut buf = vec![0u8; 1 << 20];
    let mut left = size;
    while left > 0 {
        let n = usize::try_from(left).unwrap_or(usize::MAX).min(buf.len());
        rng.fill_bytes(&mut buf[..n]);
        hasher.update(&buf[..n]);
        out.write_all(&buf[..n])?;
        left -= n as u64;
    }
    out.flush()?;
    Ok(format!("{:x}", hasher.finalize()))
}

/// `count` files of `size` bytes named `file_<i>.bin` (seeded from `seed + i`),
/// plus an `MD5SUMS` listing in `md5sum` format.
pub fn generate_fixture_set(dir: &Path, count: usize, size: u64, seed: u64) -> io::Result<Vec<FixtureFile>> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(count);
    let mut sums = String::new();
    for i in 0..count {
        let name = format!("file_{i}.bin");
        let md5 = write_random_file(&dir.join(&name), size, seed.wrapping_add(i as u64))?;
        sums.push_str(&format!("{md5}  {name}\n"));
        files.push(FixtureFile { name, size, md5 });
    }
    fs::write(dir.join("MD5SUMS"), sums)?;
    Ok(files)
}
