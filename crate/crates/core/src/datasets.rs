//! Observation container, deterministic half splitting, and CSV I/O.
//!
//! Rows are stored row-major in flat buffers. `x` holds the target
//! covariates (each coordinate in `[0, 1]`), `w` the additional variables
//! with the treatment as one designated column.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DrrfError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    x: Vec<f64>,
    w: Vec<f64>,
    d: usize,
    p: usize,
    treatment_col: usize,
}

impl Dataset {
    /// Builds a dataset from flat row-major `x` (N×d) and `w` (N×p) buffers.
    pub fn new(
        y: Vec<f64>,
        x: Vec<f64>,
        d: usize,
        w: Vec<f64>,
        p: usize,
        treatment_col: usize,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(DrrfError::Size("dataset has no rows".into()));
        }
        if d == 0 || p == 0 {
            return Err(DrrfError::Schema("need at least one x and one w column".into()));
        }
        if x.len() != n * d || w.len() != n * p {
            return Err(DrrfError::Shape(format!(
                "expected {n}x{d} x and {n}x{p} w, got {} and {} entries",
                x.len(),
                w.len()
            )));
        }
        if treatment_col >= p {
            return Err(DrrfError::Schema(format!(
                "treatment column {treatment_col} out of range for p={p}"
            )));
        }
        for i in 0..n {
            if !y[i].is_finite() {
                return Err(DrrfError::Domain(format!("row {i}: y is not finite")));
            }
            for (j, &v) in x[i * d..(i + 1) * d].iter().enumerate() {
                if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                    return Err(DrrfError::Domain(format!(
                        "row {i}: x{} = {v} outside [0, 1]",
                        j + 1
                    )));
                }
            }
            for (j, &v) in w[i * p..(i + 1) * p].iter().enumerate() {
                if !v.is_finite() {
                    return Err(DrrfError::Domain(format!("row {i}: w{} is not finite", j + 1)));
                }
            }
        }
        Ok(Self {
            y,
            x,
            w,
            d,
            p,
            treatment_col,
        })
    }

    /// Appends a constant-one column to `w`.
    pub fn with_intercept(self) -> Self {
        let n = self.len();
        let p = self.p + 1;
        let mut w = Vec::with_capacity(n * p);
        for i in 0..n {
            w.extend_from_slice(self.w_row(i));
            w.push(1.0);
        }
        Self { w, p, ..self }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn treatment_col(&self) -> usize {
        self.treatment_col
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn y_at(&self, i: usize) -> f64 {
        self.y[i]
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn w_row(&self, i: usize) -> &[f64] {
        &self.w[i * self.p..(i + 1) * self.p]
    }

    pub fn treatment(&self, i: usize) -> f64 {
        self.w_row(i)[self.treatment_col]
    }

    /// Copy of the dataset with `y` replaced.
    pub fn with_outcomes(&self, y: Vec<f64>) -> Result<Self> {
        Self::new(y, self.x.clone(), self.d, self.w.clone(), self.p, self.treatment_col)
    }

    /// Rows selected by `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut y = Vec::with_capacity(indices.len());
        let mut x = Vec::with_capacity(indices.len() * self.d);
        let mut w = Vec::with_capacity(indices.len() * self.p);
        for &i in indices {
            y.push(self.y[i]);
            x.extend_from_slice(self.x_row(i));
            w.extend_from_slice(self.w_row(i));
        }
        Self { y, x, w, ..*self }
    }

    /// Writes the CSV representation: header `y,x1..xd,w1..wp`, shortest
    /// round-trip decimal for every real.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        out.push('y');
        for j in 1..=self.d {
            let _ = write!(out, ",x{j}");
        }
        for j in 1..=self.p {
            let _ = write!(out, ",w{j}");
        }
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(out, "{:?}", self.y[i]);
            for v in self.x_row(i).iter().chain(self.w_row(i)) {
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses CSV with header `y,x1..xd,w1..wp` from any reader.
    pub fn read_csv<R: Read>(reader: R, d: usize, p: usize, treatment_col: usize) -> Result<Self> {
        let mut lines = BufReader::new(reader).lines();
        let header = match lines.next() {
            Some(line) => line.map_err(|e| DrrfError::Parse {
                row: 0,
                message: e.to_string(),
            })?,
            None => return Err(DrrfError::Schema("empty file, missing header".into())),
        };
        let expected = expected_header(d, p);
        let got: Vec<&str> = header.trim().split(',').map(str::trim).collect();
        if got.len() != expected.len() {
            return Err(DrrfError::Schema(format!(
                "header has {} columns, expected {} (y, {d} x, {p} w)",
                got.len(),
                expected.len()
            )));
        }
        if got.iter().zip(&expected).any(|(a, b)| a != b) {
            return Err(DrrfError::Schema(format!(
                "header `{}` does not match `{}`",
                header.trim(),
                expected.join(",")
            )));
        }

        let width = 1 + d + p;
        let mut y = Vec::new();
        let mut x = Vec::new();
        let mut w = Vec::new();
        for (k, line) in lines.enumerate() {
            let row = k + 1;
            let line = line.map_err(|e| DrrfError::Parse {
                row,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != width {
                return Err(DrrfError::Schema(format!(
                    "row {row}: {} columns, expected {width}",
                    fields.len()
                )));
            }
            for (c, field) in fields.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| DrrfError::Parse {
                    row,
                    message: format!("column {} is not a number: `{}`", c + 1, field.trim()),
                })?;
                if !v.is_finite() {
                    return Err(DrrfError::Domain(format!("row {row}: non-finite value")));
                }
                if c == 0 {
                    y.push(v);
                } else if c <= d {
                    if !(0.0..=1.0).contains(&v) {
                        return Err(DrrfError::Domain(format!(
                            "row {row}: x{c} = {v} outside [0, 1]"
                        )));
                    }
                    x.push(v);
                } else {
                    w.push(v);
                }
            }
        }
        Self::new(y, x, d, w, p, treatment_col)
    }
}

fn expected_header(d: usize, p: usize) -> Vec<String> {
    std::iter::once("y".to_string())
        .chain((1..=d).map(|j| format!("x{j}")))
        .chain((1..=p).map(|j| format!("w{j}")))
        .collect()
}

pub fn load_csv(path: impl AsRef<Path>, d: usize, p: usize, treatment_col: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| DrrfError::io(path, e))?;
    Dataset::read_csv(file, d, p, treatment_col)
}

pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, dataset.to_csv_string()).map_err(|e| DrrfError::io(path, e))
}

/// Reads only the header of a dataset CSV and returns `(d, p)`.
pub fn sniff_csv_dims(path: impl AsRef<Path>) -> Result<(usize, usize)> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| DrrfError::io(path, e))?;
    let mut header = String::new();
    BufReader::new(file)
        .read_line(&mut header)
        .map_err(|e| DrrfError::io(path, e))?;
    let cols: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    let d = cols.iter().filter(|c| c.starts_with('x')).count();
    let p = cols.iter().filter(|c| c.starts_with('w')).count();
    if cols.first() != Some(&"y") || d == 0 || p == 0 || cols.len() != 1 + d + p {
        return Err(DrrfError::Schema(format!("unrecognized header `{}`", header.trim())));
    }
    Ok((d, p))
}

/// Random partition of `0..N` into two halves.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HalfSplit {
    /// Sorted; gets the extra point when N is odd.
    pub first: Vec<usize>,
    /// Sorted.
    pub second: Vec<usize>,
    pub seed: u64,
}

pub fn split_halves(dataset: &Dataset, seed: u64) -> Result<HalfSplit> {
    split_indices(dataset.len(), seed)
}

pub(crate) fn split_indices(n: usize, seed: u64) -> Result<HalfSplit> {
    if n < 2 {
        return Err(DrrfError::Size(format!("cannot split {n} observations into halves")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let cut = n.div_ceil(2);
    let mut first = order[..cut].to_vec();
    let mut second = order[cut..].to_vec();
    first.sort_unstable();
    second.sort_unstable();
    Ok(HalfSplit { first, second, seed })
}
