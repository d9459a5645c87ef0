//! Datasets with missingness, MCAR masking, and a chained-equations imputer.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::rng::{derive_seed, rng_from_seed, Rng};

/// `N × (p+1)` table; column 0 is the response `y`.
///
/// `mask[r][c] = true` marks a cell that was missing in the observed data.
/// Imputed datasets keep the mask and carry finite values in masked cells;
/// unfilled masked cells hold NaN.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub names: Vec<String>,
    n_rows: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
}

/// Bitwise on values, so unfilled (NaN) cells compare equal.
impl PartialEq for Dataset {
    fn eq(&self, o: &Self) -> bool {
        self.names == o.names
            && self.n_rows == o.n_rows
            && self.mask == o.mask
            && self.values.len() == o.values.len()
            && self.values.iter().zip(&o.values).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Dataset {
    pub fn new(names: Vec<String>, n_rows: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        let n_cols = names.len();
        if n_cols == 0 {
            return usage("dataset needs at least one column");
        }
        if values.len() != n_rows * n_cols || mask.len() != values.len() {
            return usage("dataset values and mask must be n_rows × n_cols");
        }
        for (i, (&v, &m)) in values.iter().zip(&mask).enumerate() {
            if !m && !v.is_finite() {
                return usage(format!(
                    "observed cell ({}, {}) is not finite",
                    i / n_cols,
                    i % n_cols
                ));
            }
        }
        Ok(Self {
            names,
            n_rows,
            values,
            mask,
        })
    }

    /// A fully observed dataset.
    pub fn complete(names: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let n_cols = names.len();
        if rows.iter().any(|r| r.len() != n_cols) {
            return usage("row length does not match the column count");
        }
        let values: Vec<f64> = rows.iter().flatten().copied().collect();
        let mask = vec![false; values.len()];
        Self::new(names, rows.len(), values, mask)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.names.len()
    }

    /// Number of covariates.
    pub fn p(&self) -> usize {
        self.n_cols() - 1
    }

    pub fn value(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.n_cols() + c]
    }

    pub fn set_value(&mut self, r: usize, c: usize, v: f64) {
        let n = self.n_cols();
        self.values[r * n + c] = v;
    }

    pub fn is_missing(&self, r: usize, c: usize) -> bool {
        self.mask[r * self.n_cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let n = self.n_cols();
        &self.values[r * n..(r + 1) * n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Observed (unmasked) values of column `c`.
    pub fn observed_column(&self, c: usize) -> Vec<f64> {
        (0..self.n_rows)
            .filter(|&r| !self.is_missing(r, c))
            .map(|r| self.value(r, c))
            .collect()
    }

    /// `J*`: rows with at least one masked cell, ascending.
    pub fn missing_rows(&self) -> Vec<usize> {
        (0..self.n_rows)
            .filter(|&r| (0..self.n_cols()).any(|c| self.is_missing(r, c)))
            .collect()
    }

    pub fn has_mask(&self) -> bool {
        self.mask.iter().any(|&m| m)
    }

    /// A copy with every masked cell set to NaN, i.e. the observed data.
    pub fn masked(&self) -> Dataset {
        let mut out = self.clone();
        for (v, &m) in out.values.iter_mut().zip(&self.mask) {
            if m {
                *v = f64::NAN;
            }
        }
        out
    }

    /// True when every cell holds a finite value.
    pub fn is_complete(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        Self::from_csv_reader(&mut rdr)
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        Self::from_csv_reader(&mut rdr)
    }

    fn from_csv_reader<R: std::io::Read>(rdr: &mut csv::Reader<R>) -> Result<Self> {
        let names: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
        let mut values = Vec::new();
        let mut mask = Vec::new();
        let mut n_rows = 0;
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != names.len() {
                return usage(format!("CSV row {} has {} fields, expected {}", line + 1, rec.len(), names.len()));
            }
            for field in rec.iter() {
                let f = field.trim();
                if f.is_empty() {
                    values.push(f64::NAN);
                    mask.push(true);
                } else {
                    let v: f64 = f
                        .parse()
                        .map_err(|_| Error::Usage(format!("CSV row {}: cannot parse {f:?}", line + 1)))?;
                    values.push(v);
                    mask.push(false);
                }
            }
            n_rows += 1;
        }
        Self::new(names, n_rows, values, mask)
    }

    /// Writes values; non-finite cells are written empty.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.names)?;
        for r in 0..self.n_rows {
            w.write_record(self.row(r).iter().map(|v| if v.is_finite() { format!("{v}") } else { String::new() }))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes the mask as 0/1 cells under the same header.
    pub fn write_mask_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.names)?;
        for r in 0..self.n_rows {
            w.write_record((0..self.n_cols()).map(|c| if self.is_missing(r, c) { "1" } else { "0" }))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Replaces the mask with one read from a 0/1 CSV.
    pub fn with_mask_csv(mut self, path: &Path) -> Result<Self> {
        let m = Self::read_csv(path)?;
        if m.n_rows != self.n_rows || m.n_cols() != self.n_cols() {
            return usage("mask shape does not match the dataset");
        }
        self.mask = m.values.iter().map(|&v| v != 0.0).collect();
        Self::new(self.names, self.n_rows, self.values, self.mask)
    }
}

/// Lists externally imputed datasets and their shared mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationManifest {
    pub datasets: Vec<PathBuf>,
    pub mask: PathBuf,
}

impl ImputationManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Loads all datasets, resolving relative paths against `base`.
    pub fn load(&self, base: &Path) -> Result<Vec<Dataset>> {
        let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        let mask = resolve(&self.mask);
        self.datasets
            .iter()
            .map(|p| {
                let d = Dataset::read_csv(&resolve(p))?.with_mask_csv(&mask)?;
                if !d.is_complete() {
                    return Err(Error::Imputation(format!("{} has empty cells", p.display())));
                }
                Ok(d)
            })
            .collect()
    }
}

/// Masks `⌈π N⌉` uniformly chosen rows: `y` plus `⌊p/2⌋` uniformly chosen
/// covariates in each.
pub fn inject_missingness(d: &Dataset, pi: f64, seed: u64) -> Result<Dataset> {
    if !(pi > 0.0 && pi < 1.0) {
        return usage("pi must lie in (0, 1)");
    }
    if d.has_mask() || !d.is_complete() {
        return usage("missingness can only be injected into a complete dataset");
    }
    let n = d.n_rows();
    let n_miss = (pi * n as f64).ceil() as usize;
    if n_miss >= n {
        return usage(format!("masking {n_miss} of {n} rows leaves no complete row"));
    }
    let p = d.p();
    let mut rng = rng_from_seed(seed);
    let mut rows = sample_indices(&mut rng, n, n_miss).into_vec();
    rows.sort_unstable();
    let mut out = d.clone();
    let n_cols = d.n_cols();
    for &r in &rows {
        let mut cols = vec![0usize];
        cols.extend(sample_indices(&mut rng, p, p / 2).into_iter().map(|c| c + 1));
        for c in cols {
            out.mask[r * n_cols + c] = true;
            out.values[r * n_cols + c] = f64::NAN;
        }
    }
    Ok(out)
}

pub const DEFAULT_SWEEPS: usize = 10;

/// Chained-equations imputation with Bayesian linear-regression draws.
///
/// Each of the `m` outputs runs its own chain on stream
/// `derive_seed(seed, "impute", k)`.
pub fn chained_impute(d_obs: &Dataset, m: usize, n_sweeps: usize, seed: u64) -> Result<Vec<Dataset>> {
    if m == 0 {
        return usage("m must be at least 1");
    }
    for c in 0..d_obs.n_cols() {
        let n_obs = (0..d_obs.n_rows()).filter(|&r| !d_obs.is_missing(r, c)).count();
        if n_obs < 2 {
            return Err(Error::Imputation(format!(
                "column {} has {n_obs} observed values; at least 2 are required",
                d_obs.names[c]
            )));
        }
    }
    if !d_obs.has_mask() {
        return Ok(vec![d_obs.clone(); m]);
    }
    if d_obs.missing_rows().len() == d_obs.n_rows() {
        return Err(Error::Imputation("no complete row".into()));
    }
    (0..m)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng_from_seed(derive_seed(seed, "impute", k as u64));
            impute_one(d_obs, n_sweeps, &mut rng)
        })
        .collect()
}

fn impute_one(d_obs: &Dataset, n_sweeps: usize, rng: &mut Rng) -> Result<Dataset> {
    let mut d = d_obs.clone();
    let n = d.n_rows();
    let n_cols = d.n_cols();
    let observed: Vec<Vec<f64>> = (0..n_cols).map(|c| d_obs.observed_column(c)).collect();
    for r in 0..n {
        for (c, pool) in observed.iter().enumerate() {
            if d.is_missing(r, c) {
                d.set_value(r, c, pool[rng.gen_range(0..pool.len())]);
            }
        }
    }
    let targets: Vec<usize> = (0..n_cols)
        .filter(|&c| (0..n).any(|r| d.is_missing(r, c)))
        .collect();
    for _ in 0..n_sweeps {
        for &c in &targets {
            draw_column(&mut d, c, rng)?;
        }
    }
    Ok(d)
}

/// Redraws the masked cells of column `c` from the posterior predictive of a
/// Bayesian linear regression on all other columns (flat prior, small ridge).
fn draw_column(d: &mut Dataset, c: usize, rng: &mut Rng) -> Result<()> {
    let n = d.n_rows();
    let n_cols = d.n_cols();
    let q = n_cols; // intercept + (n_cols - 1) predictors
    let design_row = |d: &Dataset, r: usize| -> Vec<f64> {
        let mut x = Vec::with_capacity(q);
        x.push(1.0);
        x.extend((0..n_cols).filter(|&j| j != c).map(|j| d.value(r, j)));
        x
    };
    let obs_rows: Vec<usize> = (0..n).filter(|&r| !d.is_missing(r, c)).collect();
    let mis_rows: Vec<usize> = (0..n).filter(|&r| d.is_missing(r, c)).collect();
    let x = DMatrix::from_fn(obs_rows.len(), q, |i, j| design_row(d, obs_rows[i])[j]);
    let y = DVector::from_iterator(obs_rows.len(), obs_rows.iter().map(|&r| d.value(r, c)));
    let mut xtx = x.transpose() * &x;
    for j in 0..q {
        xtx[(j, j)] += 1e-5 * xtx[(j, j)].max(1e-8);
    }
    let chol = xtx
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Imputation(format!("singular design for column {}", d.names[c])))?;
    let beta_hat = chol.solve(&(x.transpose() * &y));
    let resid = &y - &x * &beta_hat;
    let df = (obs_rows.len() as f64 - q as f64).max(1.0);
    let chi = ChiSquared::new(df).map_err(|e| Error::Imputation(e.to_string()))?;
    let sigma2 = resid.norm_squared().max(1e-12) / chi.sample(rng);
    let sigma = sigma2.sqrt();
    // β* = β̂ + σ L⁻ᵀ z, with XᵀX = L Lᵀ, has covariance σ² (XᵀX)⁻¹.
    let z = DVector::from_iterator(q, (0..q).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let l = chol.l();
    let shift = l
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::Imputation("triangular solve failed".into()))?;
    let beta = beta_hat + shift * sigma;
    for &r in &mis_rows {
        let xr = design_row(d, r);
        let mean: f64 = xr.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
        let v = mean + sigma * rng.sample::<f64, _>(StandardNormal);
        d.set_value(r, c, v);
    }
    Ok(())
}

/// `J*` of the mask shared by two completed datasets. Mask-derived, so it is
/// a superset of the rows where the values differ.
pub fn row_diff_index(a: &Dataset, b: &Dataset) -> Result<Vec<usize>> {
    if a.n_rows() != b.n_rows() || a.n_cols() != b.n_cols() {
        return usage("datasets differ in shape");
    }
    let rows: BTreeSet<usize> = a.missing_rows().into_iter().chain(b.missing_rows()).collect();
    Ok(rows.into_iter().collect())
}
