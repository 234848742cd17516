//! Plain-text storage for sparse kernels.
//!
//! ```text
//! # contact-lab sparse kernel
//! sites 3
//! boundary periodic
//! measure 1 1 1
//! exterior_out 0 0 0
//! exterior_in 0 0 0
//! kernel 6
//! 0 1 0.5
//! ...
//! jump 0
//! ```
//!
//! `measure`, `exterior_out`, `exterior_in` and `jump` are optional. Floats
//! are written in shortest round-trip form, so write/read is lossless.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::space::{BoundaryMode, KernelParts, KernelSpace, SpaceError};
use crate::sparse::CsrMatrix;

const HEADER: &str = "# contact-lab sparse kernel";

#[derive(Debug, Error)]
pub enum KernelIoError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Space(#[from] SpaceError),
}

pub fn write_kernel<W: Write>(space: &KernelSpace, mut out: W) -> io::Result<()> {
    let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(" ");
    writeln!(out, "{HEADER}")?;
    writeln!(out, "sites {}", space.len())?;
    writeln!(out, "boundary {}", space.boundary())?;
    writeln!(out, "measure {}", join(space.measure()))?;
    writeln!(out, "exterior_out {}", join(space.exterior_out()))?;
    writeln!(out, "exterior_in {}", join(space.exterior_in()))?;
    writeln!(out, "kernel {}", space.kernel().nnz())?;
    for (x, y, v) in space.kernel().triplets() {
        writeln!(out, "{x} {y} {v}")?;
    }
    if let Some(j) = space.jump() {
        writeln!(out, "jump {}", j.nnz())?;
        for (x, y, v) in j.triplets() {
            writeln!(out, "{x} {y} {v}")?;
        }
    }
    out.flush()
}

pub fn write_kernel_file(space: &KernelSpace, path: &Path) -> io::Result<()> {
    write_kernel(space, BufWriter::new(File::create(path)?))
}

pub fn read_kernel_file(path: &Path) -> Result<KernelSpace, KernelIoError> {
    read_kernel(BufReader::new(File::open(path)?))
}

pub fn read_kernel<R: BufRead>(input: R) -> Result<KernelSpace, KernelIoError> {
    let mut lines = input
        .lines()
        .enumerate()
        .map(|(i, l)| l.map(|l| (i + 1, l)))
        .filter(|r| {
            r.as_ref()
                .map(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
                .unwrap_or(true)
        });
    let err = |line: usize, message: String| KernelIoError::Parse { line, message };

    let mut n = None;
    let mut boundary = BoundaryMode::Periodic;
    let mut measure = None;
    let mut exterior_out = None;
    let mut exterior_in = None;
    let mut kernel = None;
    let mut jump = None;

    while let Some(item) = lines.next() {
        let (no, line) = item?;
        let mut words = line.split_whitespace();
        let key = words.next().unwrap_or_default();
        let rest: Vec<&str> = words.collect();
        let sites = |n: Option<usize>| n.ok_or_else(|| err(no, "`sites` must come first".into()));
        let floats = |rest: &[&str], n: usize| -> Result<Vec<f64>, KernelIoError> {
            if rest.len() != n {
                return Err(err(no, format!("expected {n} values, found {}", rest.len())));
            }
            rest.iter()
                .map(|w| w.parse::<f64>().map_err(|e| err(no, format!("`{w}`: {e}"))))
                .collect()
        };
        match key {
            "sites" => {
                let value = rest.first().and_then(|w| w.parse().ok());
                n = Some(value.ok_or_else(|| err(no, "expected a site count".into()))?);
            }
            "boundary" => {
                boundary = rest
                    .first()
                    .ok_or_else(|| err(no, "missing boundary mode".into()))?
                    .parse()
                    .map_err(|e| err(no, e))?;
            }
            "measure" => measure = Some(floats(&rest, sites(n)?)?),
            "exterior_out" => exterior_out = Some(floats(&rest, sites(n)?)?),
            "exterior_in" => exterior_in = Some(floats(&rest, sites(n)?)?),
            "kernel" | "jump" => {
                let dim = sites(n)?;
                let count: usize = rest
                    .first()
                    .and_then(|w| w.parse().ok())
                    .ok_or_else(|| err(no, "expected an entry count".into()))?;
                let mut triplets = Vec::with_capacity(count);
                for _ in 0..count {
                    let (no, line) = lines
                        .next()
                        .ok_or_else(|| err(no, "unexpected end of file".into()))??;
                    let parts: Vec<&str> = line.split_whitespace().collect();
                    let parsed = match parts.as_slice() {
                        [x, y, v] => x
                            .parse::<usize>()
                            .ok()
                            .zip(y.parse::<usize>().ok())
                            .zip(v.parse::<f64>().ok()),
                        _ => None,
                    };
                    let ((x, y), v) =
                        parsed.ok_or_else(|| err(no, format!("malformed entry `{line}`")))?;
                    if x >= dim || y >= dim {
                        return Err(err(no, format!("index out of range for {dim} sites")));
                    }
                    triplets.push((x, y, v));
                }
                let m = CsrMatrix::from_triplets(dim, triplets);
                if key == "kernel" {
                    kernel = Some(m);
                } else {
                    jump = Some(m);
                }
            }
            other => return Err(err(no, format!("unknown key `{other}`"))),
        }
    }
    let n = n.ok_or_else(|| err(0, "missing `sites`".into()))?;
    let kernel = kernel.ok_or_else(|| err(0, "missing `kernel` section".into()))?;
    let mut parts = KernelParts::closed(kernel, boundary);
    if let Some(m) = measure {
        parts.measure = m;
    }
    parts.exterior_out = exterior_out.unwrap_or_else(|| vec![0.0; n]);
    parts.exterior_in = exterior_in.unwrap_or_else(|| vec![0.0; n]);
    parts.metadata.insert("model".into(), "kernel_file".into());
    let space = KernelSpace::new(parts)?;
    Ok(match jump {
        Some(j) => {
            let bound = 1.0
                + j.weighted_row_sums(space.measure())
                    .iter()
                    .chain(&j.weighted_col_sums(space.measure()))
                    .copied()
                    .fold(0.0, f64::max);
            space.with_jump_kernel(j, bound)?
        }
        None => space,
    })
}
