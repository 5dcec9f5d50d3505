//! On-disk eigensystem cache.
//!
//! File layout (all little-endian): magic `QFDT`, format version `u32`,
//! dimension `u64`, the energies as `f64`, then the eigenvector matrix as
//! column-major `f64`. Files are named by the SHA-256 of the dimension and the
//! column-major bytes of the Hamiltonian.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use faer::Mat;
use sha2::{Digest, Sha256};

use super::{diagonalize, EigenSystem};
use crate::error::{Error, Result};
use crate::hilbert::BasisTag;

pub const MAGIC: &[u8; 4] = b"QFDT";
pub const FORMAT_VERSION: u32 = 1;
pub const EXTENSION: &str = "qfdt";
pub const CACHE_DIR_ENV: &str = "QFDT_CACHE_DIR";
pub const DEFAULT_CACHE_DIR: &str = ".qfdt-cache";

pub fn write_eigensystem<W: Write>(mut w: W, eig: &EigenSystem) -> Result<()> {
    let n = eig.dimension();
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(n as u64).to_le_bytes())?;
    for e in eig.energies() {
        w.write_all(&e.to_le_bytes())?;
    }
    let v = eig.vectors();
    for c in 0..n {
        for r in 0..n {
            w.write_all(&v[(r, c)].to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn read_eigensystem<R: Read>(mut r: R, basis: BasisTag) -> Result<EigenSystem> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Cache("bad magic bytes".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(Error::Cache(format!("unsupported format version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let n = usize::try_from(u64::from_le_bytes(b8))
        .map_err(|_| Error::Cache("dimension does not fit in memory".into()))?;
    if n == 0 || n > 1 << 16 {
        return Err(Error::Cache(format!("implausible dimension {n}")));
    }
    let energies = (0..n).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
    let mut vectors = Mat::zeros(n, n);
    for c in 0..n {
        for row in 0..n {
            vectors[(row, c)] = read_f64(&mut r)?;
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Cache("trailing bytes after eigenvectors".into()));
    }
    EigenSystem::from_parts(energies, vectors, basis).map_err(|e| Error::Cache(e.to_string()))
}

/// Content hash of a dense Hamiltonian.
pub fn key(h: &Mat<f64>) -> String {
    let mut hasher = Sha256::new();
    hasher.update((h.nrows() as u64).to_le_bytes());
    for c in 0..h.ncols() {
        for r in 0..h.nrows() {
            hasher.update(h[(r, c)].to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheStats {
    pub entries: usize,
    pub bytes: u64,
}

#[derive(Debug, Clone)]
pub struct EigenCache {
    dir: PathBuf,
}

impl EigenCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    /// Location from `QFDT_CACHE_DIR`, else `.qfdt-cache` in the working
    /// directory.
    pub fn from_env() -> Self {
        Self::new(std::env::var_os(CACHE_DIR_ENV).map_or_else(|| PathBuf::from(DEFAULT_CACHE_DIR), PathBuf::from))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.{EXTENSION}"))
    }

    pub fn load(&self, key: &str, basis: BasisTag) -> Result<Option<EigenSystem>> {
        let path = self.path_for(key);
        match fs::File::open(&path) {
            Ok(f) => read_eigensystem(BufReader::new(f), basis).map(Some),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Writes through a temporary file so readers never see a partial entry.
    pub fn store(&self, key: &str, eig: &EigenSystem) -> Result<PathBuf> {
        fs::create_dir_all(&self.dir)?;
        let path = self.path_for(key);
        let tmp = self.dir.join(format!("{key}.{}.tmp", std::process::id()));
        write_eigensystem(BufWriter::new(fs::File::create(&tmp)?), eig)?;
        fs::rename(&tmp, &path)?;
        Ok(path)
    }

    pub fn get_or_compute(&self, h: &Mat<f64>, basis: BasisTag) -> Result<EigenSystem> {
        let k = key(h);
        match self.load(&k, basis) {
            Ok(Some(eig)) if eig.dimension() == h.nrows() => return Ok(eig),
            Ok(_) => {}
            Err(e) => log::warn!("ignoring unreadable cache entry {k}: {e}"),
        }
        let eig = diagonalize(h, basis)?;
        if let Err(e) = self.store(&k, &eig) {
            log::warn!("could not write cache entry {k}: {e}");
        }
        Ok(eig)
    }

    fn entries(&self) -> Result<Vec<PathBuf>> {
        let rd = match fs::read_dir(&self.dir) {
            Ok(rd) => rd,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let mut out = Vec::new();
        for entry in rd {
            let path = entry?.path();
            if path.extension().is_some_and(|x| x == EXTENSION) {
                out.push(path);
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn stats(&self) -> Result<CacheStats> {
        let entries = self.entries()?;
        let mut bytes = 0;
        for p in &entries {
            bytes += fs::metadata(p)?.len();
        }
        Ok(CacheStats {
            entries: entries.len(),
            bytes,
        })
    }

    /// Removes every cache entry; returns how many were deleted.
    pub fn clear(&self) -> Result<usize> {
        let entries = self.entries()?;
        for p in &entries {
            fs::remove_file(p)?;
        }
        Ok(entries.len())
    }
}
