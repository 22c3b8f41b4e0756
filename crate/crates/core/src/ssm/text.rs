//! Plain-text state-space files.
//!
//! ```text
//! # comment lines are ignored
//! diagonal <N> <delta>      or      dense <N> <delta>
//! <re> <im>                 one complex entry per line:
//! ...                       diagonal: lambda (N), B (N), C (N)
//!                           dense: A row-major (N*N), B (N), C (N)
//! ```

use std::fmt::Write as _;
use std::path::Path;

use super::{DenseSsm, DiagonalSsm};
use crate::error::{Error, Result};
use crate::linalg::{CMat, C64};

#[derive(Clone, Debug, PartialEq)]
pub enum SsmFile {
    Diagonal(DiagonalSsm),
    Dense(DenseSsm),
}

impl SsmFile {
    pub fn to_dense(&self) -> DenseSsm {
        match self {
            SsmFile::Diagonal(d) => d.to_dense(),
            SsmFile::Dense(d) => d.clone(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut push = |z: &C64| {
            writeln!(out, "{:.16e} {:.16e}", z.re, z.im).unwrap();
        };
        let (header, entries): (String, Vec<&C64>) = match self {
            SsmFile::Diagonal(d) => (
                format!("diagonal {} {:.16e}", d.order(), d.delta),
                d.lambda.iter().chain(&d.b).chain(&d.c).collect(),
            ),
            SsmFile::Dense(d) => (
                format!("dense {} {:.16e}", d.order(), d.delta),
                d.a.as_slice().iter().chain(&d.b).chain(&d.c).collect(),
            ),
        };
        for z in entries {
            push(z);
        }
        format!("{header}\n{out}")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (hrow, header) = lines.next().ok_or(Error::Parse { row: 0, msg: "empty file".into() })?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse { row: hrow, msg: "header must be `<kind> <N> <delta>`".into() });
        }
        let n: usize = fields[1].parse().map_err(|_| Error::Parse { row: hrow, msg: "bad order".into() })?;
        let delta: f64 = fields[2].parse().map_err(|_| Error::Parse { row: hrow, msg: "bad delta".into() })?;
        let mut entries = Vec::new();
        for (row, line) in lines {
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 2 {
                return Err(Error::Parse { row, msg: "expected `re im`".into() });
            }
            let re: f64 = parts[0].parse().map_err(|_| Error::Parse { row, msg: "bad real part".into() })?;
            let im: f64 = parts[1].parse().map_err(|_| Error::Parse { row, msg: "bad imaginary part".into() })?;
            entries.push(C64::new(re, im));
        }
        match fields[0] {
            "diagonal" => {
                expect_count(&entries, 3 * n)?;
                let c = entries.split_off(2 * n);
                let b = entries.split_off(n);
                Ok(SsmFile::Diagonal(DiagonalSsm::new(entries, b, c, delta)?))
            }
            "dense" => {
                expect_count(&entries, n * n + 2 * n)?;
                let c = entries.split_off(n * n + n);
                let b = entries.split_off(n * n);
                Ok(SsmFile::Dense(DenseSsm::new(CMat::new(n, n, entries)?, b, c, delta)?))
            }
            other => Err(Error::Parse { row: hrow, msg: format!("unknown kind `{other}`") }),
        }
    }
}

fn expect_count(entries: &[C64], want: usize) -> Result<()> {
    if entries.len() != want {
        return Err(Error::Parse { row: 0, msg: format!("expected {want} entries, found {}", entries.len()) });
    }
    Ok(())
}

pub fn read_ssm_file(path: &Path) -> Result<SsmFile> {
    SsmFile::parse(&std::fs::read_to_string(path)?)
}

pub fn write_ssm_file(path: &Path, sys: &SsmFile) -> Result<()> {
    std::fs::write(path, sys.to_text())?;
    Ok(())
}
