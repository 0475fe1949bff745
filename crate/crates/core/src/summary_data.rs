//! Ingest univariable GWAS summary statistics, harmonize variant allele
//! coding, and construct the multivariable summary bundle consumed by all
//! downstream statistics.
//!
//! File-format notes live in the repository README. The LD matrix is expected
//! in the same allele coding as the outcome table; harmonization re-expresses
//! the outcome associations and the LD matrix in the exposure table's coding.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Maximum acceptable condition number for the LD matrix.
pub const LD_CONDITION_LIMIT: f64 = 1e12;

/// Per-variant univariable association tables for K exposures and one
/// outcome, plus the variant (LD) and exposure correlation matrices.
#[derive(Debug, Clone)]
pub struct UnivariableGwasTables {
    pub variants: Vec<String>,
    /// Exposure-table allele coding (canonical after harmonization).
    pub effect_allele: Vec<String>,
    pub other_allele: Vec<String>,
    /// Outcome-table allele coding; rewritten to match the exposure coding
    /// by [`harmonize_variants`].
    pub outcome_effect_allele: Vec<String>,
    pub outcome_other_allele: Vec<String>,
    pub exposure_names: Vec<String>,
    /// J x K univariable variant-exposure coefficients.
    pub exposure_beta: DMatrix<f64>,
    /// J x K standard errors matching `exposure_beta`.
    pub exposure_se: DMatrix<f64>,
    pub outcome_beta: DVector<f64>,
    pub outcome_se: DVector<f64>,
    /// J x J variant correlation matrix.
    pub ld: DMatrix<f64>,
    /// K x K exposure correlation matrix.
    pub exposure_cor: DMatrix<f64>,
    pub n_x: u64,
    pub n_y: u64,
}

impl UnivariableGwasTables {
    pub fn n_variants(&self) -> usize {
        self.variants.len()
    }

    pub fn n_exposures(&self) -> usize {
        self.exposure_names.len()
    }

    /// Restrict all tables to the given variant rows (in the given order).
    pub fn subset(&self, rows: &[usize]) -> Result<UnivariableGwasTables> {
        let j = self.n_variants();
        if rows.iter().any(|&r| r >= j) {
            return Err(Error::Dimension(format!(
                "subset index out of range (J = {j})"
            )));
        }
        let pick = |v: &[String]| rows.iter().map(|&r| v[r].clone()).collect::<Vec<_>>();
        Ok(UnivariableGwasTables {
            variants: pick(&self.variants),
            effect_allele: pick(&self.effect_allele),
            other_allele: pick(&self.other_allele),
            outcome_effect_allele: pick(&self.outcome_effect_allele),
            outcome_other_allele: pick(&self.outcome_other_allele),
            exposure_names: self.exposure_names.clone(),
            exposure_beta: self.exposure_beta.select_rows(rows),
            exposure_se: self.exposure_se.select_rows(rows),
            outcome_beta: DVector::from_iterator(rows.len(), rows.iter().map(|&r| self.outcome_beta[r])),
            outcome_se: DVector::from_iterator(rows.len(), rows.iter().map(|&r| self.outcome_se[r])),
            ld: self.ld.select_rows(rows).select_columns(rows),
            exposure_cor: self.exposure_cor.clone(),
            n_x: self.n_x,
            n_y: self.n_y,
        })
    }
}

/// The (Gamma_hat, gamma_hat, Sigma_Gamma, Sigma_gamma) bundle every
/// statistic consumes. Covariances are on the sqrt(n_X) scale: `outcome_cov`
/// estimates the variance of sqrt(n_X) * (Gamma_hat - Gamma), and
/// `exposure_cov` the variance of sqrt(n_X) * vec(gamma_hat - gamma) in
/// column-stacked order (the J rows of exposure k form block k).
#[derive(Debug, Clone)]
pub struct MultivariableSummary {
    /// Multivariable variant-outcome associations (J-vector).
    pub outcome_assoc: DVector<f64>,
    /// Multivariable variant-exposure associations (J x K).
    pub exposure_assoc: DMatrix<f64>,
    /// J x J covariance of the outcome associations.
    pub outcome_cov: DMatrix<f64>,
    /// JK x JK covariance of the column-stacked exposure associations.
    pub exposure_cov: DMatrix<f64>,
    pub n_x: u64,
    pub n_y: u64,
    /// Sample-size ratio n_X / n_Y.
    pub c: f64,
}

impl MultivariableSummary {
    pub fn n_variants(&self) -> usize {
        self.outcome_assoc.len()
    }

    pub fn n_exposures(&self) -> usize {
        self.exposure_assoc.ncols()
    }

    /// J x J block (k, m) of the exposure covariance: the covariance between
    /// sqrt(n_X) gamma_hat_k and sqrt(n_X) gamma_hat_m.
    pub fn exposure_cov_block(&self, k: usize, m: usize) -> nalgebra::DMatrixView<'_, f64> {
        let j = self.n_variants();
        self.exposure_cov.view((k * j, m * j), (j, j))
    }

    /// Structural invariants: dimensions, symmetry, block transposes, PD.
    pub fn validate(&self) -> Result<()> {
        let j = self.n_variants();
        let k = self.n_exposures();
        if k == 0 || j < k {
            return Err(Error::Dimension(format!("need J >= K >= 1, got J={j}, K={k}")));
        }
        if self.outcome_cov.nrows() != j || self.exposure_cov.nrows() != j * k {
            return Err(Error::Dimension("covariance dimensions do not match J, K".into()));
        }
        for (m, label) in [(&self.outcome_cov, "Sigma_Gamma"), (&self.exposure_cov, "Sigma_gamma")] {
            let asym = (m - m.transpose()).abs().max();
            if asym > 1e-8 * m.abs().max().max(1.0) {
                return Err(Error::InvalidCovariance(format!("{label} (asymmetric)")));
            }
            if linalg::cholesky(m).is_none() {
                return Err(Error::InvalidCovariance(label.to_string()));
            }
        }
        Ok(())
    }
}

/// Interpretation of the per-variant coefficient units in the tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputScale {
    /// Per-allele GWAS units: betas are rescaled to standardized-variant
    /// units via beta / (se * sqrt(n)), after which every standard error
    /// is 1/sqrt(n) of its own study.
    PerAllele,
    /// Betas and standard errors are already on a var(Z_j) = 1 scale and
    /// are used as-is.
    Standardized,
}

/// Result of [`build_multivariable_summary`]: the bundle plus any
/// ridge-repair warnings.
#[derive(Debug, Clone)]
pub struct SummaryBuild {
    pub summary: MultivariableSummary,
    pub warnings: Vec<String>,
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

fn read_to_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

fn parse_num(tok: &str, path: &Path, line: usize) -> Result<f64> {
    tok.parse::<f64>().map_err(|_| Error::Parse {
        path: path.display().to_string(),
        line,
        msg: format!("expected a number, found {tok:?}"),
    })
}

fn split_fields(line: &str) -> Vec<&str> {
    line.split_whitespace().collect()
}

struct OutcomeRow {
    effect: String,
    other: String,
    beta: f64,
    se: f64,
}

/// Read the exposure, outcome, LD, and exposure-correlation files into a
/// [`UnivariableGwasTables`]. Row order follows the exposure file; the LD
/// matrix is aligned by its optional header row when one is present.
pub fn load_gwas_tables(
    exposure_path: &Path,
    outcome_path: &Path,
    ld_path: &Path,
    exposure_cor_path: &Path,
    n_x: u64,
    n_y: u64,
) -> Result<UnivariableGwasTables> {
    if n_x == 0 || n_y == 0 {
        return Err(Error::InvalidConfig("sample sizes must be positive".into()));
    }

    // Exposure table: variant, effect_allele, other_allele, beta_<k>, se_<k>, ...
    let lines = read_to_lines(exposure_path)?;
    let mut it = lines.iter().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = it
        .next()
        .ok_or_else(|| Error::Parse {
            path: exposure_path.display().to_string(),
            line: 1,
            msg: "empty file".into(),
        })?;
    let cols = split_fields(header);
    if cols.len() < 5 || cols[0] != "variant" || cols[1] != "effect_allele" || cols[2] != "other_allele" {
        return Err(Error::Parse {
            path: exposure_path.display().to_string(),
            line: hline + 1,
            msg: "expected header: variant effect_allele other_allele beta_<name> se_<name> ...".into(),
        });
    }
    let mut exposure_names = Vec::new();
    let mut c = 3;
    while c < cols.len() {
        let (b, s) = (cols[c], cols.get(c + 1).copied().unwrap_or(""));
        let bn = b.strip_prefix("beta_");
        let sn = s.strip_prefix("se_");
        match (bn, sn) {
            (Some(bn), Some(sn)) if bn == sn => exposure_names.push(bn.to_string()),
            _ => {
                return Err(Error::Parse {
                    path: exposure_path.display().to_string(),
                    line: hline + 1,
                    msg: format!("expected paired beta_<name> se_<name> columns, found {b:?} {s:?}"),
                })
            }
        }
        c += 2;
    }
    let k = exposure_names.len();

    let mut variants = Vec::new();
    let mut effect_allele = Vec::new();
    let mut other_allele = Vec::new();
    let mut beta_rows: Vec<Vec<f64>> = Vec::new();
    let mut se_rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in it {
        let f = split_fields(line);
        if f.len() != 3 + 2 * k {
            return Err(Error::Parse {
                path: exposure_path.display().to_string(),
                line: i + 1,
                msg: format!("expected {} fields, found {}", 3 + 2 * k, f.len()),
            });
        }
        variants.push(f[0].to_string());
        effect_allele.push(f[1].to_uppercase());
        other_allele.push(f[2].to_uppercase());
        let mut betas = Vec::with_capacity(k);
        let mut ses = Vec::with_capacity(k);
        for e in 0..k {
            betas.push(parse_num(f[3 + 2 * e], exposure_path, i + 1)?);
            let se = parse_num(f[4 + 2 * e], exposure_path, i + 1)?;
            if se <= 0.0 {
                return Err(Error::NonPositiveSe {
                    table: "exposure".into(),
                    variant: f[0].to_string(),
                });
            }
            ses.push(se);
        }
        beta_rows.push(betas);
        se_rows.push(ses);
    }
    let j = variants.len();
    if j == 0 {
        return Err(Error::Dimension("exposure table has no variant rows".into()));
    }
    {
        let mut seen = HashMap::new();
        for v in &variants {
            if seen.insert(v.clone(), ()).is_some() {
                return Err(Error::Parse {
                    path: exposure_path.display().to_string(),
                    line: 0,
                    msg: format!("duplicate variant {v}"),
                });
            }
        }
    }

    // Outcome table keyed by variant id.
    let lines = read_to_lines(outcome_path)?;
    let mut it = lines.iter().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = it.next().ok_or_else(|| Error::Parse {
        path: outcome_path.display().to_string(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let cols = split_fields(header);
    if cols != ["variant", "effect_allele", "other_allele", "beta", "se"] {
        return Err(Error::Parse {
            path: outcome_path.display().to_string(),
            line: hline + 1,
            msg: "expected header: variant effect_allele other_allele beta se".into(),
        });
    }
    let mut outcome: HashMap<String, OutcomeRow> = HashMap::new();
    for (i, line) in it {
        let f = split_fields(line);
        if f.len() != 5 {
            return Err(Error::Parse {
                path: outcome_path.display().to_string(),
                line: i + 1,
                msg: format!("expected 5 fields, found {}", f.len()),
            });
        }
        let se = parse_num(f[4], outcome_path, i + 1)?;
        if se <= 0.0 {
            return Err(Error::NonPositiveSe {
                table: "outcome".into(),
                variant: f[0].to_string(),
            });
        }
        outcome.insert(
            f[0].to_string(),
            OutcomeRow {
                effect: f[1].to_uppercase(),
                other: f[2].to_uppercase(),
                beta: parse_num(f[3], outcome_path, i + 1)?,
                se,
            },
        );
    }
    let missing: Vec<String> = variants.iter().filter(|v| !outcome.contains_key(*v)).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::VariantMismatch {
            table: "outcome".into(),
            missing,
        });
    }

    // LD matrix, optional variant-id header row.
    let lines = read_to_lines(ld_path)?;
    let data_lines: Vec<(usize, &String)> = lines
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .collect();
    let mut ld_order: Option<Vec<String>> = None;
    let mut start = 0;
    if let Some((_, first)) = data_lines.first() {
        let f = split_fields(first);
        if f.iter().any(|t| t.parse::<f64>().is_err()) {
            ld_order = Some(f.iter().map(|s| s.to_string()).collect());
            start = 1;
        }
    }
    let rows = &data_lines[start..];
    if rows.len() != j {
        return Err(Error::Dimension(format!(
            "LD matrix has {} rows, expected {} (one per exposure-table variant)",
            rows.len(),
            j
        )));
    }
    let mut ld_raw = DMatrix::zeros(j, j);
    for (r, (lineno, line)) in rows.iter().enumerate() {
        let f = split_fields(line);
        if f.len() != j {
            return Err(Error::Dimension(format!(
                "LD matrix is not square: row {} has {} entries, expected {}",
                r + 1,
                f.len(),
                j
            )));
        }
        for (cc, tok) in f.iter().enumerate() {
            ld_raw[(r, cc)] = parse_num(tok, ld_path, lineno + 1)?;
        }
    }
    let ld = match ld_order {
        None => ld_raw,
        Some(order) => {
            let pos: HashMap<&str, usize> = order.iter().enumerate().map(|(i, v)| (v.as_str(), i)).collect();
            let missing: Vec<String> = variants.iter().filter(|v| !pos.contains_key(v.as_str())).cloned().collect();
            if !missing.is_empty() {
                return Err(Error::VariantMismatch { table: "ld".into(), missing });
            }
            if order.len() != j {
                return Err(Error::Dimension(format!(
                    "LD header names {} variants, expected {}",
                    order.len(),
                    j
                )));
            }
            let idx: Vec<usize> = variants.iter().map(|v| pos[v.as_str()]).collect();
            DMatrix::from_fn(j, j, |r, c| ld_raw[(idx[r], idx[c])])
        }
    };

    // Exposure correlation, K x K (optional header of exposure names).
    let lines = read_to_lines(exposure_cor_path)?;
    let data_lines: Vec<(usize, &String)> = lines
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .collect();
    let mut start = 0;
    if let Some((_, first)) = data_lines.first() {
        if split_fields(first).iter().any(|t| t.parse::<f64>().is_err()) {
            start = 1;
        }
    }
    let rows = &data_lines[start..];
    if rows.len() != k {
        return Err(Error::Dimension(format!(
            "exposure correlation has {} rows, expected {}",
            rows.len(),
            k
        )));
    }
    let mut exposure_cor = DMatrix::zeros(k, k);
    for (r, (lineno, line)) in rows.iter().enumerate() {
        let f = split_fields(line);
        if f.len() != k {
            return Err(Error::Dimension(format!(
                "exposure correlation row {} has {} entries, expected {}",
                r + 1,
                f.len(),
                k
            )));
        }
        for (cc, tok) in f.iter().enumerate() {
            exposure_cor[(r, cc)] = parse_num(tok, exposure_cor_path, lineno + 1)?;
        }
    }

    let outcome_beta = DVector::from_iterator(j, variants.iter().map(|v| outcome[v].beta));
    let outcome_se = DVector::from_iterator(j, variants.iter().map(|v| outcome[v].se));
    let outcome_effect_allele: Vec<String> = variants.iter().map(|v| outcome[v].effect.clone()).collect();
    let outcome_other_allele: Vec<String> = variants.iter().map(|v| outcome[v].other.clone()).collect();

    Ok(UnivariableGwasTables {
        variants,
        effect_allele,
        other_allele,
        outcome_effect_allele,
        outcome_other_allele,
        exposure_names,
        exposure_beta: DMatrix::from_fn(j, k, |r, c| beta_rows[r][c]),
        exposure_se: DMatrix::from_fn(j, k, |r, c| se_rows[r][c]),
        outcome_beta,
        outcome_se,
        ld,
        exposure_cor,
        n_x,
        n_y,
    })
}

// ---------------------------------------------------------------------------
// Harmonization
// ---------------------------------------------------------------------------

fn complement(a: &str) -> Option<&'static str> {
    match a {
        "A" => Some("T"),
        "T" => Some("A"),
        "C" => Some("G"),
        "G" => Some("C"),
        _ => None,
    }
}

fn is_palindromic(effect: &str, other: &str) -> bool {
    complement(effect).is_some_and(|c| c == other)
}

/// Align the outcome table (and the LD matrix, which shares its coding) to
/// the exposure table's allele coding. Variants whose outcome coding is
/// swapped get their outcome beta negated and the corresponding LD
/// row/column sign-flipped. Strand-ambiguous variants (A/T, G/C) are
/// rejected unless `allow_ambiguous` is set, in which case same-strand
/// coding is assumed and a warning is recorded.
pub fn harmonize_variants(
    tables: &UnivariableGwasTables,
    allow_ambiguous: bool,
) -> Result<(UnivariableGwasTables, Vec<String>)> {
    let mut out = tables.clone();
    let mut warnings = Vec::new();
    let j = tables.n_variants();
    let mut flip = vec![false; j];

    for i in 0..j {
        let (ee, eo) = (tables.effect_allele[i].as_str(), tables.other_allele[i].as_str());
        let (oe, oo) = (
            tables.outcome_effect_allele[i].as_str(),
            tables.outcome_other_allele[i].as_str(),
        );
        let ambiguous = is_palindromic(ee, eo);
        if ambiguous {
            if !allow_ambiguous {
                return Err(Error::AmbiguousVariant {
                    variant: tables.variants[i].clone(),
                    alleles: format!("{ee}/{eo}"),
                });
            }
            warnings.push(format!(
                "strand-ambiguous variant {} ({ee}/{eo}) kept assuming same-strand coding",
                tables.variants[i]
            ));
        }
        let direct_match = oe == ee && oo == eo;
        let direct_swap = oe == eo && oo == ee;
        let strand = if ambiguous {
            None
        } else {
            complement(oe).zip(complement(oo))
        };
        let strand_match = strand.is_some_and(|(ce, co)| ce == ee && co == eo);
        let strand_swap = strand.is_some_and(|(ce, co)| ce == eo && co == ee);

        if direct_match || strand_match {
            // aligned
        } else if direct_swap || strand_swap {
            flip[i] = true;
        } else {
            return Err(Error::Unharmonizable {
                variant: tables.variants[i].clone(),
                exposure: format!("{ee}/{eo}"),
                outcome: format!("{oe}/{oo}"),
            });
        }
        out.outcome_effect_allele[i] = tables.effect_allele[i].clone();
        out.outcome_other_allele[i] = tables.other_allele[i].clone();
    }

    for i in 0..j {
        if flip[i] {
            out.outcome_beta[i] = -out.outcome_beta[i];
            for m in 0..j {
                if m != i {
                    out.ld[(i, m)] = -out.ld[(i, m)];
                    out.ld[(m, i)] = -out.ld[(m, i)];
                }
            }
        }
    }

    Ok((out, warnings))
}

// ---------------------------------------------------------------------------
// Multivariable construction
// ---------------------------------------------------------------------------

fn check_correlation_matrix(m: &DMatrix<f64>, label: &str) -> Result<()> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::Dimension(format!("{label} matrix is not square")));
    }
    for i in 0..n {
        if (m[(i, i)] - 1.0).abs() > 1e-6 {
            return Err(Error::Dimension(format!(
                "{label} diagonal entry {} is {}, expected 1",
                i + 1,
                m[(i, i)]
            )));
        }
        for jj in 0..i {
            if (m[(i, jj)] - m[(jj, i)]).abs() > 1e-6 {
                return Err(Error::Dimension(format!("{label} matrix is not symmetric")));
            }
        }
    }
    Ok(())
}

/// Ridge repair per the construction contract: if the smallest eigenvalue
/// falls below 1e-10 * trace/dim, add a ridge of that magnitude; fail if the
/// matrix is still not positive definite.
fn repair_pd(m: &mut DMatrix<f64>, label: &str, warnings: &mut Vec<String>) -> Result<()> {
    linalg::symmetrize(m);
    let ev = linalg::sym_eigenvalues(m);
    let min_ev = ev[0];
    let dim = m.nrows() as f64;
    let thresh = 1e-10 * m.trace() / dim;
    if min_ev < thresh {
        for i in 0..m.nrows() {
            m[(i, i)] += thresh;
        }
        warnings.push(format!(
            "{label}: smallest eigenvalue {min_ev:.3e} below {thresh:.3e}; ridge of {thresh:.3e} added"
        ));
        if min_ev + thresh <= 0.0 {
            return Err(Error::InvalidCovariance(label.to_string()));
        }
    }
    Ok(())
}

/// Build the multivariable summary bundle from harmonized tables via the
/// standardized-genotype GLS mapping:
///
/// ```text
/// Gamma_hat     = R^{ -1} b_out
/// gamma_hat_k   = R^{-1} b_k
/// Sigma_Gamma   = n_X * R^{-1} S_out R S_out R^{-1}
/// Sigma_gamma(k,m) = cor_X[k,m] * n_X * R^{-1} S_k R S_m R^{-1}
/// ```
///
/// where R is the LD matrix, b are the (possibly rescaled) univariable
/// betas, and S the diagonal matrices of their (possibly rescaled) standard
/// errors. With `InputScale::PerAllele` every beta is first divided by
/// (se * sqrt(n)) of its own regression and the standard errors become
/// 1/sqrt(n), placing everything on a var(Z_j) = 1 scale. The mapping
/// reduces to the univariable quantities when R is the identity.
pub fn build_multivariable_summary(
    tables: &UnivariableGwasTables,
    scale: InputScale,
) -> Result<SummaryBuild> {
    let j = tables.n_variants();
    let k = tables.n_exposures();
    if j < k || k == 0 {
        return Err(Error::Dimension(format!("need J >= K >= 1, got J={j}, K={k}")));
    }
    check_correlation_matrix(&tables.ld, "LD")?;
    check_correlation_matrix(&tables.exposure_cor, "exposure correlation")?;
    for i in 0..j {
        if tables.outcome_se[i] <= 0.0 {
            return Err(Error::NonPositiveSe {
                table: "outcome".into(),
                variant: tables.variants[i].clone(),
            });
        }
        for e in 0..k {
            if tables.exposure_se[(i, e)] <= 0.0 {
                return Err(Error::NonPositiveSe {
                    table: "exposure".into(),
                    variant: tables.variants[i].clone(),
                });
            }
        }
    }

    let sqrt_nx = (tables.n_x as f64).sqrt();
    let sqrt_ny = (tables.n_y as f64).sqrt();
    let (b_out, s_out, b_exp, s_exp) = match scale {
        InputScale::Standardized => (
            tables.outcome_beta.clone(),
            tables.outcome_se.clone(),
            tables.exposure_beta.clone(),
            tables.exposure_se.clone(),
        ),
        InputScale::PerAllele => {
            let b_out = DVector::from_fn(j, |i, _| {
                tables.outcome_beta[i] / (tables.outcome_se[i] * sqrt_ny)
            });
            let s_out = DVector::from_element(j, 1.0 / sqrt_ny);
            let b_exp = DMatrix::from_fn(j, k, |i, e| {
                tables.exposure_beta[(i, e)] / (tables.exposure_se[(i, e)] * sqrt_nx)
            });
            let s_exp = DMatrix::from_element(j, k, 1.0 / sqrt_nx);
            (b_out, s_out, b_exp, s_exp)
        }
    };

    let mut r = tables.ld.clone();
    linalg::symmetrize(&mut r);
    let ev = linalg::sym_eigenvalues(&r);
    let (min_ev, max_ev) = (ev[0], ev[ev.len() - 1]);
    let cond = if min_ev <= 0.0 { f64::INFINITY } else { max_ev / min_ev };
    if cond > LD_CONDITION_LIMIT {
        return Err(Error::IllConditionedLd {
            cond,
            limit: LD_CONDITION_LIMIT,
        });
    }
    let chol_r = linalg::cholesky(&r).ok_or(Error::IllConditionedLd {
        cond,
        limit: LD_CONDITION_LIMIT,
    })?;

    let outcome_assoc = chol_r.solve(&b_out);
    let mut exposure_assoc = DMatrix::zeros(j, k);
    for e in 0..k {
        let col = chol_r.solve(&b_exp.column(e).clone_owned());
        exposure_assoc.set_column(e, &col);
    }

    let n_x = tables.n_x as f64;
    // T = R^{-1} S for a diagonal S; then R^{-1} S R S' R^{-1} = T R T'.
    let t_of = |s: &DVector<f64>| -> DMatrix<f64> {
        let mut m = DMatrix::zeros(j, j);
        for (i, &v) in s.iter().enumerate() {
            m[(i, i)] = v;
        }
        chol_r.solve(&m)
    };
    let t_out = t_of(&s_out);
    let mut outcome_cov = (&t_out * &r * t_out.transpose()) * n_x;

    let t_exp: Vec<DMatrix<f64>> = (0..k).map(|e| t_of(&s_exp.column(e).clone_owned())).collect();
    let mut exposure_cov = DMatrix::zeros(j * k, j * k);
    for a in 0..k {
        for b in 0..k {
            let block = (&t_exp[a] * &r * t_exp[b].transpose()) * (tables.exposure_cor[(a, b)] * n_x);
            exposure_cov.view_mut((a * j, b * j), (j, j)).copy_from(&block);
        }
    }

    let mut warnings = Vec::new();
    repair_pd(&mut outcome_cov, "Sigma_Gamma", &mut warnings)?;
    repair_pd(&mut exposure_cov, "Sigma_gamma", &mut warnings)?;

    let summary = MultivariableSummary {
        outcome_assoc,
        exposure_assoc,
        outcome_cov,
        exposure_cov,
        n_x: tables.n_x,
        n_y: tables.n_y,
        c: tables.n_x as f64 / tables.n_y as f64,
    };
    summary.validate()?;
    Ok(SummaryBuild { summary, warnings })
}
