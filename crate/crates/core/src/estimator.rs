//! Parameter recovery: nonlinear least squares on shares (Levenberg–Marquardt
//! with an analytic Jacobian), bootstrap intervals, and the reduced-form OLS
//! baseline.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{softmax, Activity, Feature, ModelForm, ThetaMatrix, FEATURE_DIM, FREE_ACTIVITIES, PARAM_DIM};
use crate::record::Record;
use crate::rng::{derive_seed, rng};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.96;

const CHUNK: usize = 256;

/// Regressors and observed shares, ready for fitting.
#[derive(Clone, Debug)]
pub struct Design {
    pub x: Vec<[f64; FEATURE_DIM]>,
    pub y: Vec<[f64; 4]>,
    /// Number of observed shares moved into the clamp interval.
    pub clamped: usize,
}

impl Design {
    /// Builds the design from records, clamping degenerate shares into
    /// `[clamp, 1 - clamp]`.
    pub fn from_records(records: &[Record], clamp: f64) -> Result<Design> {
        let mut x = Vec::with_capacity(records.len());
        let mut y = Vec::with_capacity(records.len());
        let mut clamped = 0;
        for r in records {
            let shares = *r.observed()?.to_shares().as_array();
            let s = shares.map(|v| {
                let c = v.clamp(clamp, 1.0 - clamp);
                if c != v {
                    clamped += 1;
                }
                c
            });
            x.push(*r.features.as_array());
            y.push(s);
        }
        Ok(Design { x, y, clamped })
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    fn resample(&self, idx: &[usize]) -> Design {
        Design {
            x: idx.iter().map(|&i| self.x[i]).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            clamped: 0,
        }
    }
}

/// Verifies that the active design columns are linearly independent and
/// names the offending columns otherwise.
pub fn check_rank(x: &[[f64; FEATURE_DIM]], active: &[Feature]) -> Result<()> {
    let n = x.len();
    let mut kept: Vec<(Feature, DVector<f64>)> = Vec::new();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for &f in active {
        let col = DVector::from_iterator(n, x.iter().map(|row| row[f.index()]));
        let norm = col.norm();
        if norm == 0.0 {
            return Err(Error::RankDeficient(format!("column `{f}` is identically zero")));
        }
        let mut res = col.clone();
        // two passes of modified Gram-Schmidt
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&res);
                res.axpy(-c, q, 1.0);
            }
        }
        let rnorm = res.norm();
        if rnorm <= 1e-9 * norm {
            let names = collinear_partners(&kept, &col);
            return Err(Error::RankDeficient(format!(
                "column `{f}` is collinear with [{}]",
                names.join(", ")
            )));
        }
        basis.push(res / rnorm);
        kept.push((f, col));
    }
    Ok(())
}

fn collinear_partners(kept: &[(Feature, DVector<f64>)], col: &DVector<f64>) -> Vec<String> {
    if kept.is_empty() {
        return Vec::new();
    }
    let n = col.len();
    let m = DMatrix::from_fn(n, kept.len(), |i, j| kept[j].1[i]);
    let coef = m.clone().svd(true, true).solve(col, 1e-12).unwrap_or_else(|_| DVector::zeros(kept.len()));
    kept.iter()
        .zip(coef.iter())
        .filter(|(_, c)| c.abs() > 1e-8)
        .map(|((f, _), _)| f.name().to_string())
        .collect()
}

/// Structural NLLS options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Features with free coefficients; the rest are pinned at zero.
    pub active_features: Vec<Feature>,
    pub max_iterations: usize,
    pub rel_sse_tol: f64,
    pub gradient_tol: f64,
    pub initial_lambda: f64,
    pub share_clamp: f64,
    /// Starting point; zeros (uniform shares) when absent.
    pub initial: Option<ThetaMatrix>,
    pub multi_start: Option<MultiStart>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            active_features: Feature::ALL.to_vec(),
            max_iterations: 500,
            rel_sse_tol: 1e-10,
            gradient_tol: 1e-8,
            initial_lambda: 1e-3,
            share_clamp: 1e-6,
            initial: None,
            multi_start: None,
        }
    }
}

impl FitOptions {
    pub fn intercept_only() -> Self {
        FitOptions {
            active_features: vec![Feature::Intercept],
            ..FitOptions::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.active_features.is_empty() {
            return Err(Error::InvalidConfig("at least one active feature is required".into()));
        }
        let mut sorted = self.active_features.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.active_features.len() {
            return Err(Error::InvalidConfig("active features contain duplicates".into()));
        }
        if !(0.0..0.5).contains(&self.share_clamp) {
            return Err(Error::InvalidConfig("share clamp must lie in [0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Perturbed restarts; the best is chosen by SSE, then by smallest ‖θ‖₂.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiStart {
    pub starts: usize,
    pub scale: f64,
    pub seed: u64,
}

impl Default for MultiStart {
    fn default() -> Self {
        MultiStart { starts: 5, scale: 0.5, seed: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CiMethod {
    Asymptotic,
    Bootstrap { replicates: usize, seed: u64, failures: usize },
}

/// Estimated structural parameters with uncertainty and solver diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub model_form: ModelForm,
    pub feature_names: Vec<String>,
    pub active_features: Vec<Feature>,
    pub theta_hat: ThetaMatrix,
    /// Covariance over the flattened activity-major coefficients; rows and
    /// columns of pinned coefficients are zero.
    pub covariance: DMatrix<f64>,
    pub se: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
    pub ci_method: CiMethod,
    pub sse: f64,
    pub sigma2: f64,
    pub n_obs: usize,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
    pub clamped_shares: usize,
    /// SSE after each accepted step, starting with the initial point.
    pub sse_history: Vec<f64>,
}

impl FitResult {
    pub fn flat(&self) -> Vec<f64> {
        self.theta_hat.flat()
    }
}

struct Accum {
    ata: DMatrix<f64>,
    atb: DVector<f64>,
    sse: f64,
}

/// Maps free parameters to (activity, feature) positions.
struct ParamLayout {
    active: Vec<Feature>,
}

impl ParamLayout {
    fn len(&self) -> usize {
        FREE_ACTIVITIES * self.active.len()
    }

    fn full_index(&self, p: usize) -> usize {
        let k = self.active.len();
        (p / k) * FEATURE_DIM + self.active[p % k].index()
    }

    fn to_theta(&self, params: &DVector<f64>) -> ThetaMatrix {
        let mut flat = vec![0.0; PARAM_DIM];
        for p in 0..self.len() {
            flat[self.full_index(p)] = params[p];
        }
        ThetaMatrix::from_flat(&flat).unwrap_or_default()
    }

    fn params_of(&self, theta: &ThetaMatrix) -> DVector<f64> {
        let flat = theta.flat();
        DVector::from_iterator(self.len(), (0..self.len()).map(|p| flat[self.full_index(p)]))
    }
}

fn shares_for(theta: &ThetaMatrix, x: &[f64; FEATURE_DIM]) -> [f64; 4] {
    let mut idx = [0.0; 4];
    for (j, row) in theta.rows().iter().enumerate() {
        idx[j] = row.iter().zip(x).map(|(t, v)| t * v).sum();
    }
    softmax(&idx)
}

/// Fills the 4 × (3k) block `∂s_j/∂θ_{a,f} = s_j (δ_ja − s_a) x_f` for one record.
fn share_jacobian_block(s: &[f64; 4], x: &[f64; FEATURE_DIM], layout: &ParamLayout, out: &mut [f64]) {
    let k = layout.active.len();
    let p = layout.len();
    for j in 0..4 {
        for a in 0..FREE_ACTIVITIES {
            let d = if j == a { 1.0 } else { 0.0 };
            let w = s[j] * (d - s[a]);
            for (m, f) in layout.active.iter().enumerate() {
                out[j * p + a * k + m] = w * x[f.index()];
            }
        }
    }
}

fn sse_only(design: &Design, theta: &ThetaMatrix) -> f64 {
    design
        .x
        .par_chunks(CHUNK)
        .zip(design.y.par_chunks(CHUNK))
        .map(|(xs, ys)| {
            xs.iter()
                .zip(ys)
                .map(|(x, y)| {
                    let s = shares_for(theta, x);
                    (0..4).map(|j| (y[j] - s[j]).powi(2)).sum::<f64>()
                })
                .sum::<f64>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum()
}

fn accumulate(design: &Design, theta: &ThetaMatrix, layout: &ParamLayout) -> Accum {
    let p = layout.len();
    let partials: Vec<Accum> = design
        .x
        .par_chunks(CHUNK)
        .zip(design.y.par_chunks(CHUNK))
        .map(|(xs, ys)| {
            let mut acc = Accum {
                ata: DMatrix::zeros(p, p),
                atb: DVector::zeros(p),
                sse: 0.0,
            };
            let mut block = vec![0.0; 4 * p];
            for (x, y) in xs.iter().zip(ys) {
                let s = shares_for(theta, x);
                share_jacobian_block(&s, x, layout, &mut block);
                for j in 0..4 {
                    let r = y[j] - s[j];
                    acc.sse += r * r;
                    let row = &block[j * p..(j + 1) * p];
                    for a in 0..p {
                        if row[a] == 0.0 {
                            continue;
                        }
                        acc.atb[a] += row[a] * r;
                        for b in a..p {
                            acc.ata[(a, b)] += row[a] * row[b];
                        }
                    }
                }
            }
            acc
        })
        .collect();
    // fixed chunk order keeps the reduction deterministic
    let mut total = Accum {
        ata: DMatrix::zeros(p, p),
        atb: DVector::zeros(p),
        sse: 0.0,
    };
    for part in partials {
        total.ata += part.ata;
        total.atb += part.atb;
        total.sse += part.sse;
    }
    for a in 0..p {
        for b in 0..a {
            total.ata[(a, b)] = total.ata[(b, a)];
        }
    }
    total
}

/// Share Jacobian `∂s_ij/∂θ_{a,f}`: rows are (record, activity) pairs in
/// record-major canonical order (4 per record), columns the flattened
/// activity-major coefficients. The NLLS residual Jacobian is its negation.
pub fn jacobian(theta: &ThetaMatrix, records: &[Record]) -> DMatrix<f64> {
    let layout = ParamLayout { active: Feature::ALL.to_vec() };
    let mut j = DMatrix::zeros(4 * records.len(), PARAM_DIM);
    let mut block = vec![0.0; 4 * PARAM_DIM];
    for (i, r) in records.iter().enumerate() {
        let x = r.features.as_array();
        let s = shares_for(theta, x);
        share_jacobian_block(&s, x, &layout, &mut block);
        for a in 0..4 {
            for c in 0..PARAM_DIM {
                j[(4 * i + a, c)] = block[a * PARAM_DIM + c];
            }
        }
    }
    j
}

/// NLLS objective `Σ_i Σ_j (s_ij^obs − s_ij(θ))²` over all four activities.
pub fn objective(design: &Design, theta: &ThetaMatrix) -> f64 {
    sse_only(design, theta)
}

struct LmOutcome {
    theta: ThetaMatrix,
    accum: Accum,
    iterations: usize,
    converged: bool,
    gradient_norm: f64,
    history: Vec<f64>,
}

fn solve_damped(ata: &DMatrix<f64>, atb: &DVector<f64>, lambda: f64) -> Option<DVector<f64>> {
    let p = ata.nrows();
    let max_diag = (0..p).map(|i| ata[(i, i)]).fold(0.0, f64::max);
    let mut m = ata.clone();
    for i in 0..p {
        let d = ata[(i, i)].max(1e-12 * max_diag.max(1e-300));
        m[(i, i)] += lambda * d;
    }
    m.cholesky().map(|c| c.solve(atb))
}

fn levenberg_marquardt(design: &Design, start: &ThetaMatrix, layout: &ParamLayout, opts: &FitOptions) -> LmOutcome {
    let mut params = layout.params_of(start);
    let mut theta = layout.to_theta(&params);
    let mut accum = accumulate(design, &theta, layout);
    let mut lambda = opts.initial_lambda;
    let mut history = vec![accum.sse];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        iterations += 1;
        if accum.sse == 0.0 {
            converged = true;
            break;
        }
        let mut accepted = false;
        let mut stalled = false;
        while !accepted {
            let step = match solve_damped(&accum.ata, &accum.atb, lambda) {
                Some(s) if s.iter().all(|v| v.is_finite()) => s,
                _ => {
                    lambda *= 10.0;
                    if lambda > 1e16 {
                        stalled = true;
                        break;
                    }
                    continue;
                }
            };
            let candidate = &params + &step;
            let cand_theta = layout.to_theta(&candidate);
            let cand_sse = sse_only(design, &cand_theta);
            if cand_sse.is_finite() && cand_sse < accum.sse {
                let rel = (accum.sse - cand_sse) / accum.sse;
                params = candidate;
                theta = cand_theta;
                accum = accumulate(design, &theta, layout);
                history.push(accum.sse);
                lambda = (lambda / 10.0).max(1e-300);
                accepted = true;
                let grad = accum.atb.amax();
                if rel < opts.rel_sse_tol && grad < opts.gradient_tol {
                    converged = true;
                }
            } else {
                lambda *= 10.0;
                if lambda > 1e16 {
                    stalled = true;
                    break;
                }
            }
        }
        if converged {
            break;
        }
        if stalled {
            // No representable improvement is left; accept the point only if it is stationary.
            converged = accum.atb.amax() < opts.gradient_tol;
            break;
        }
    }
    LmOutcome {
        gradient_norm: accum.atb.amax(),
        theta,
        accum,
        iterations,
        converged,
        history,
    }
}

fn theta_norm(t: &ThetaMatrix) -> f64 {
    t.flat().iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn fit_design_inner(design: &Design, opts: &FitOptions) -> Result<(LmOutcome, ParamLayout)> {
    opts.validate()?;
    let layout = ParamLayout { active: opts.active_features.clone() };
    let n = design.n();
    if n < 2 * layout.active.len() {
        return Err(Error::InsufficientData(format!(
            "structural fit needs at least {} observations, got {n}",
            2 * layout.active.len()
        )));
    }
    check_rank(&design.x, &layout.active)?;
    let base = opts.initial.clone().unwrap_or_default();
    let mut starts = vec![base.clone()];
    if let Some(ms) = &opts.multi_start {
        let normal = Normal::new(0.0, ms.scale.max(1e-12)).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for s in 0..ms.starts {
            let mut r = rng(derive_seed(ms.seed, s as u64));
            let flat: Vec<f64> = base.flat().iter().map(|v| v + normal.sample(&mut r)).collect();
            starts.push(ThetaMatrix::from_flat(&flat)?);
        }
    }
    let outcomes: Vec<LmOutcome> = starts
        .par_iter()
        .map(|s| levenberg_marquardt(design, s, &layout, opts))
        .collect();
    let best = outcomes
        .into_iter()
        .reduce(|a, b| {
            let tie = (a.accum.sse - b.accum.sse).abs() <= 1e-12 * a.accum.sse.max(b.accum.sse);
            let b_better = if tie {
                theta_norm(&b.theta) < theta_norm(&a.theta)
            } else {
                b.accum.sse < a.accum.sse
            };
            if b_better {
                b
            } else {
                a
            }
        })
        .expect("at least one start");
    Ok((best, layout))
}

/// Fits the structural share model to a prepared design.
pub fn fit_design(design: &Design, opts: &FitOptions) -> Result<FitResult> {
    let (out, layout) = fit_design_inner(design, opts)?;
    let p = layout.len();
    let n = design.n();
    let dof = (3 * n).saturating_sub(p).max(1);
    let sigma2 = out.accum.sse / dof as f64;
    let inv = match out.accum.ata.clone().cholesky() {
        Some(c) => c.inverse(),
        None => out
            .accum
            .ata
            .clone()
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::NotConverged(format!("singular information matrix: {e}")))?,
    };
    let mut cov = DMatrix::zeros(PARAM_DIM, PARAM_DIM);
    for a in 0..p {
        for b in 0..p {
            let v = 0.5 * (inv[(a, b)] + inv[(b, a)]) * sigma2;
            cov[(layout.full_index(a), layout.full_index(b))] = v;
        }
    }
    let est = out.theta.flat();
    let se: Vec<f64> = (0..PARAM_DIM).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
    let ci_low = est.iter().zip(&se).map(|(e, s)| e - Z_95 * s).collect();
    let ci_high = est.iter().zip(&se).map(|(e, s)| e + Z_95 * s).collect();
    Ok(FitResult {
        model_form: ModelForm::Softmax,
        feature_names: Feature::ALL.iter().map(|f| f.name().to_string()).collect(),
        active_features: layout.active.clone(),
        theta_hat: out.theta,
        covariance: cov,
        se,
        ci_low,
        ci_high,
        ci_method: CiMethod::Asymptotic,
        sse: out.accum.sse,
        sigma2,
        n_obs: n,
        iterations: out.iterations,
        converged: out.converged,
        gradient_norm: out.gradient_norm,
        clamped_shares: design.clamped,
        sse_history: out.history,
    })
}

/// Fits the structural share model to records with observed allocations.
pub fn fit_structural(records: &[Record], opts: &FitOptions) -> Result<FitResult> {
    let design = Design::from_records(records, opts.share_clamp)?;
    fit_design(&design, opts)
}

/// Percentile bootstrap intervals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapIntervals {
    pub replicates: usize,
    pub seed: u64,
    pub failures: usize,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
}

/// Linear-interpolation percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Resamples records with replacement `replicates` times, refits each, and
/// returns 2.5/97.5 percentile intervals per coefficient.
pub fn bootstrap_ci(records: &[Record], opts: &FitOptions, replicates: usize, seed: u64) -> Result<BootstrapIntervals> {
    if replicates < 100 {
        return Err(Error::InvalidConfig(format!("bootstrap needs at least 100 replicates, got {replicates}")));
    }
    let design = Design::from_records(records, opts.share_clamp)?;
    let n = design.n();
    let fits: Vec<Option<Vec<f64>>> = (0..replicates)
        .into_par_iter()
        .map(|b| {
            let mut r = rng(derive_seed(seed, b as u64));
            let idx: Vec<usize> = (0..n).map(|_| r.random_range(0..n)).collect();
            let resampled = design.resample(&idx);
            match fit_design_inner(&resampled, opts) {
                Ok((out, _)) if out.converged => Some(out.theta.flat()),
                _ => None,
            }
        })
        .collect();
    let failures = fits.iter().filter(|f| f.is_none()).count();
    if failures * 10 > replicates {
        return Err(Error::BootstrapFailures { failed: failures, total: replicates });
    }
    let ok: Vec<&Vec<f64>> = fits.iter().flatten().collect();
    let mut ci_low = Vec::with_capacity(PARAM_DIM);
    let mut ci_high = Vec::with_capacity(PARAM_DIM);
    for c in 0..PARAM_DIM {
        let mut col: Vec<f64> = ok.iter().map(|v| v[c]).collect();
        col.sort_by(|a, b| a.total_cmp(b));
        ci_low.push(percentile(&col, 0.025));
        ci_high.push(percentile(&col, 0.975));
    }
    Ok(BootstrapIntervals {
        replicates,
        seed,
        failures,
        ci_low,
        ci_high,
    })
}

impl FitResult {
    /// Replaces the asymptotic intervals with bootstrap percentiles.
    pub fn with_bootstrap(mut self, boot: &BootstrapIntervals) -> Self {
        self.ci_low = boot.ci_low.clone();
        self.ci_high = boot.ci_high.clone();
        self.ci_method = CiMethod::Bootstrap {
            replicates: boot.replicates,
            seed: boot.seed,
            failures: boot.failures,
        };
        self
    }
}

/// Per-activity linear regressions of shares on features.
#[derive(Clone, Debug, PartialEq)]
pub struct OlsResult {
    pub feature_names: Vec<String>,
    pub active_features: Vec<Feature>,
    /// Coefficients per activity in canonical order (including Other).
    pub coef: [[f64; FEATURE_DIM]; 4],
    pub se: [[f64; FEATURE_DIM]; 4],
    pub r_squared: [f64; 4],
    pub n_obs: usize,
}

impl OlsResult {
    pub fn margin(&self, activity: Activity, feature: Feature) -> f64 {
        Z_95 * self.se[activity.index()][feature.index()]
    }

    /// All 44 coefficients, activity-major in canonical order.
    pub fn flat(&self) -> Vec<f64> {
        self.coef.iter().flatten().copied().collect()
    }
}

pub fn fit_ols_design(design: &Design, active: &[Feature]) -> Result<OlsResult> {
    let n = design.n();
    let k = active.len();
    if n <= k {
        return Err(Error::InsufficientData(format!("OLS needs more than {k} observations, got {n}")));
    }
    check_rank(&design.x, active)?;
    let x = DMatrix::from_fn(n, k, |i, c| design.x[i][active[c].index()]);
    let qr = x.clone().qr();
    let r = qr.r();
    let q = qr.q();
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::RankDeficient("triangular factor is singular".into()))?;
    // (XᵀX)⁻¹ = R⁻¹ R⁻ᵀ
    let xtx_inv = &r_inv * r_inv.transpose();
    let mut coef = [[0.0; FEATURE_DIM]; 4];
    let mut se = [[0.0; FEATURE_DIM]; 4];
    let mut r_squared = [0.0; 4];
    for a in Activity::ALL {
        let y = DVector::from_iterator(n, design.y.iter().map(|s| s[a.index()]));
        let qty = q.transpose() * &y;
        let beta = &r_inv * qty;
        let fitted = &x * &beta;
        let resid = &y - fitted;
        let rss = resid.norm_squared();
        let mean = y.mean();
        let tss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
        let sigma2 = rss / (n - k) as f64;
        for (c, f) in active.iter().enumerate() {
            coef[a.index()][f.index()] = beta[c];
            se[a.index()][f.index()] = (sigma2 * xtx_inv[(c, c)]).max(0.0).sqrt();
        }
        r_squared[a.index()] = if tss > 0.0 { 1.0 - rss / tss } else { 0.0 };
    }
    Ok(OlsResult {
        feature_names: Feature::ALL.iter().map(|f| f.name().to_string()).collect(),
        active_features: active.to_vec(),
        coef,
        se,
        r_squared,
        n_obs: n,
    })
}

/// Reduced-form baseline: one OLS regression of the observed share per activity.
/// Shares are used as observed (no clamping).
pub fn fit_ols(records: &[Record], active: &[Feature]) -> Result<OlsResult> {
    let design = Design::from_records(records, 0.0)?;
    fit_ols_design(&design, active)
}

// ---------------------------------------------------------------------------
// JSON layout

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub activity: Activity,
    pub feature: String,
    pub estimate: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub sse: f64,
    pub sigma2: f64,
    pub n_obs: usize,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
    pub clamped_shares: usize,
    pub active_features: Vec<Feature>,
    pub sse_history: Vec<f64>,
}

/// On-disk form of a structural fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResultFile {
    pub estimator: String,
    pub model_form: ModelForm,
    pub ci_method: CiMethod,
    pub features: Vec<String>,
    pub coefficients: Vec<CoefficientRow>,
    pub covariance: Vec<Vec<f64>>,
    pub diagnostics: FitDiagnostics,
}

impl From<&FitResult> for FitResultFile {
    fn from(fit: &FitResult) -> Self {
        let est = fit.theta_hat.flat();
        let mut coefficients = Vec::with_capacity(PARAM_DIM);
        for a in Activity::FREE {
            for (fi, name) in fit.feature_names.iter().enumerate() {
                let i = a.index() * FEATURE_DIM + fi;
                coefficients.push(CoefficientRow {
                    activity: a,
                    feature: name.clone(),
                    estimate: est[i],
                    se: fit.se[i],
                    ci_low: fit.ci_low[i],
                    ci_high: fit.ci_high[i],
                });
            }
        }
        FitResultFile {
            estimator: "structural".into(),
            model_form: fit.model_form,
            ci_method: fit.ci_method.clone(),
            features: fit.feature_names.clone(),
            coefficients,
            covariance: (0..PARAM_DIM)
                .map(|r| (0..PARAM_DIM).map(|c| fit.covariance[(r, c)]).collect())
                .collect(),
            diagnostics: FitDiagnostics {
                sse: fit.sse,
                sigma2: fit.sigma2,
                n_obs: fit.n_obs,
                iterations: fit.iterations,
                converged: fit.converged,
                gradient_norm: fit.gradient_norm,
                clamped_shares: fit.clamped_shares,
                active_features: fit.active_features.clone(),
                sse_history: fit.sse_history.clone(),
            },
        }
    }
}

fn check_feature_names(names: &[String]) -> Result<()> {
    let canonical: Vec<&str> = Feature::ALL.iter().map(|f| f.name()).collect();
    if names.len() != canonical.len() || names.iter().zip(&canonical).any(|(a, b)| a != b) {
        let differing: Vec<String> = names
            .iter()
            .filter(|n| !canonical.contains(&n.as_str()))
            .cloned()
            .chain(canonical.iter().filter(|c| !names.iter().any(|n| n == *c)).map(|c| c.to_string()))
            .collect();
        return Err(Error::SchemaMismatch(format!(
            "feature order differs from the canonical layout; differing: [{}]",
            differing.join(", ")
        )));
    }
    Ok(())
}

impl TryFrom<FitResultFile> for FitResult {
    type Error = Error;

    fn try_from(file: FitResultFile) -> Result<Self> {
        if file.estimator != "structural" {
            return Err(Error::SchemaMismatch(format!("expected a structural fit, got `{}`", file.estimator)));
        }
        check_feature_names(&file.features)?;
        if file.coefficients.len() != PARAM_DIM {
            return Err(Error::SchemaMismatch(format!(
                "expected {PARAM_DIM} coefficient rows, got {}",
                file.coefficients.len()
            )));
        }
        let mut est = vec![0.0; PARAM_DIM];
        let mut se = vec![0.0; PARAM_DIM];
        let mut lo = vec![0.0; PARAM_DIM];
        let mut hi = vec![0.0; PARAM_DIM];
        for row in &file.coefficients {
            let f = Feature::from_name(&row.feature)
                .ok_or_else(|| Error::SchemaMismatch(format!("unknown feature `{}`", row.feature)))?;
            if row.activity == Activity::Other {
                return Err(Error::SchemaMismatch("the reference activity has no coefficients".into()));
            }
            let i = row.activity.index() * FEATURE_DIM + f.index();
            est[i] = row.estimate;
            se[i] = row.se;
            lo[i] = row.ci_low;
            hi[i] = row.ci_high;
        }
        if file.covariance.len() != PARAM_DIM || file.covariance.iter().any(|r| r.len() != PARAM_DIM) {
            return Err(Error::SchemaMismatch("covariance must be 33 x 33".into()));
        }
        let d = file.diagnostics;
        Ok(FitResult {
            model_form: file.model_form,
            feature_names: file.features,
            active_features: d.active_features,
            theta_hat: ThetaMatrix::from_flat(&est)?,
            covariance: DMatrix::from_fn(PARAM_DIM, PARAM_DIM, |r, c| file.covariance[r][c]),
            se,
            ci_low: lo,
            ci_high: hi,
            ci_method: file.ci_method,
            sse: d.sse,
            sigma2: d.sigma2,
            n_obs: d.n_obs,
            iterations: d.iterations,
            converged: d.converged,
            gradient_norm: d.gradient_norm,
            clamped_shares: d.clamped_shares,
            sse_history: d.sse_history,
        })
    }
}

impl Serialize for FitResult {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        FitResultFile::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for FitResult {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let file = FitResultFile::deserialize(d)?;
        FitResult::try_from(file).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OlsCoefficientRow {
    pub activity: Activity,
    pub feature: String,
    pub estimate: f64,
    pub se: f64,
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OlsResultFile {
    pub estimator: String,
    pub features: Vec<String>,
    pub active_features: Vec<Feature>,
    pub coefficients: Vec<OlsCoefficientRow>,
    pub r_squared: Vec<(Activity, f64)>,
    pub n_obs: usize,
}

impl Serialize for OlsResult {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut coefficients = Vec::new();
        for a in Activity::ALL {
            for f in Feature::ALL {
                coefficients.push(OlsCoefficientRow {
                    activity: a,
                    feature: f.name().to_string(),
                    estimate: self.coef[a.index()][f.index()],
                    se: self.se[a.index()][f.index()],
                    margin: self.margin(a, f),
                });
            }
        }
        OlsResultFile {
            estimator: "ols".into(),
            features: self.feature_names.clone(),
            active_features: self.active_features.clone(),
            coefficients,
            r_squared: Activity::ALL.iter().map(|a| (*a, self.r_squared[a.index()])).collect(),
            n_obs: self.n_obs,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for OlsResult {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let file = OlsResultFile::deserialize(d)?;
        if file.estimator != "ols" {
            return Err(D::Error::custom(format!("expected an ols fit, got `{}`", file.estimator)));
        }
        check_feature_names(&file.features).map_err(D::Error::custom)?;
        let mut coef = [[0.0; FEATURE_DIM]; 4];
        let mut se = [[0.0; FEATURE_DIM]; 4];
        for row in file.coefficients {
            let f = Feature::from_name(&row.feature)
                .ok_or_else(|| D::Error::custom(format!("unknown feature `{}`", row.feature)))?;
            coef[row.activity.index()][f.index()] = row.estimate;
            se[row.activity.index()][f.index()] = row.se;
        }
        let mut r_squared = [0.0; 4];
        for (a, v) in file.r_squared {
            r_squared[a.index()] = v;
        }
        Ok(OlsResult {
            feature_names: file.features,
            active_features: file.active_features,
            coef,
            se,
            r_squared,
            n_obs: file.n_obs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{predict_shares, Allocation, FeatureVector};
    use crate::record::{Demographics, EduLevel, Moments, Race, SpouseStatus, StandardizationParams};
    use crate::synth::{generate_population, random_theta, simulate_allocations, NoiseConfig, PopulationConfig};

    fn population(n: usize, seed: u64) -> Vec<Record> {
        let cfg = PopulationConfig {
            n,
            seed,
            race_probs: [0.6, 0.15, 0.07, 0.1, 0.08],
            ..PopulationConfig::default()
        };
        generate_population(&cfg).unwrap().0
    }

    fn mad(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
    }

    #[test]
    fn jacobian_at_uniform_point() {
        let p = StandardizationParams {
            age: Moments { mean: 40.0, sd: 10.0 },
            edu: Moments { mean: 2.0, sd: 1.0 },
            earnweek: Moments { mean: 900.0, sd: 300.0 },
        };
        let demo = Demographics {
            age: 40.0,
            male: false,
            race: Race::White,
            edu: EduLevel::SomeCollege,
            spouse: SpouseStatus::NoPartner,
            earnweek: 900.0,
        };
        let r = Record::new("a", demo, &p);
        assert_eq!(r.features, FeatureVector::intercept_only());
        let j = jacobian(&ThetaMatrix::zeros(), &[r]);
        assert_eq!(j.nrows(), 4);
        assert_eq!(j.ncols(), PARAM_DIM);
        assert!((j[(0, 0)] - 0.1875).abs() < 1e-15);
        // zero features give zero columns
        for f in Feature::ALL.into_iter().skip(1) {
            for a in 0..3 {
                for row in 0..4 {
                    assert_eq!(j[(row, a * FEATURE_DIM + f.index())], 0.0);
                }
            }
        }
    }

    #[test]
    fn noiseless_recovery() {
        let recs = population(600, 21);
        let truth = random_theta(8, 0.3);
        let sim = simulate_allocations(&truth, &recs, &NoiseConfig::None, 1, 1440.0).unwrap();
        let fit = fit_structural(&sim, &FitOptions::default()).unwrap();
        assert!(fit.converged, "{:?}", fit.sse_history);
        assert!(mad(&fit.flat(), &truth.flat()) < 1e-6);
        for w in fit.sse_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn intercept_only_matches_mean_shares() {
        let recs = population(200, 4);
        let target = [266.0, 247.0, 578.0, 349.0];
        let sim: Vec<Record> = recs
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                // alternate around the target so the sample mean is exact
                let d = if i % 2 == 0 { 20.0 } else { -20.0 };
                let m = [target[0] + d, target[1] - d, target[2], target[3]];
                r.with_observed(Allocation::new(m, 1440.0).unwrap())
            })
            .collect();
        let fit = fit_structural(&sim, &FitOptions::intercept_only()).unwrap();
        assert!(fit.converged);
        let s = predict_shares(&fit.theta_hat, &FeatureVector::intercept_only());
        for (a, t) in s.as_array().iter().zip(target) {
            assert!((a - t / 1440.0).abs() < 1e-8);
        }
    }

    #[test]
    fn duplicated_column_names_both() {
        let mut recs = population(200, 5);
        for r in &mut recs {
            r.demo.spouse = if r.demo.male { SpouseStatus::Spouse } else { SpouseStatus::NoPartner };
        }
        let p = crate::ingest::fit_standardization(&recs.iter().map(|r| r.demo).collect::<Vec<_>>()).unwrap();
        crate::record::restandardize(&mut recs, &p);
        let sim = simulate_allocations(&ThetaMatrix::zeros(), &recs, &NoiseConfig::None, 1, 1440.0).unwrap();
        match fit_structural(&sim, &FitOptions::default()) {
            Err(Error::RankDeficient(msg)) => {
                assert!(msg.contains("spouse_present") && msg.contains("male"), "{msg}");
            }
            other => panic!("expected rank deficiency, got {other:?}"),
        }
        assert!(matches!(
            fit_ols(&sim, &Feature::ALL),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn ols_intercept_only_is_mean_share() {
        let recs = population(300, 6);
        let sim = simulate_allocations(&random_theta(2, 0.4), &recs, &NoiseConfig::Dirichlet { kappa: 50.0 }, 3, 1440.0)
            .unwrap();
        let ols = fit_ols(&sim, &[Feature::Intercept]).unwrap();
        for a in Activity::ALL {
            let mean = sim.iter().map(|r| r.observed.unwrap().to_shares().get(a)).sum::<f64>() / sim.len() as f64;
            assert!((ols.coef[a.index()][0] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_json_round_trip() {
        let recs = population(300, 7);
        let sim = simulate_allocations(&random_theta(2, 0.3), &recs, &NoiseConfig::Dirichlet { kappa: 200.0 }, 3, 1440.0)
            .unwrap();
        let fit = fit_structural(&sim, &FitOptions::default()).unwrap();
        let json = serde_json::to_string(&fit).unwrap();
        let back: FitResult = serde_json::from_str(&json).unwrap();
        assert_eq!(back, fit);
        let ols = fit_ols(&sim, &Feature::ALL).unwrap();
        let back: OlsResult = serde_json::from_str(&serde_json::to_string(&ols).unwrap()).unwrap();
        assert_eq!(back, ols);
    }

    #[test]
    fn too_few_observations() {
        let recs = population(10, 7);
        let sim = simulate_allocations(&ThetaMatrix::zeros(), &recs, &NoiseConfig::None, 1, 1440.0).unwrap();
        assert!(matches!(fit_structural(&sim, &FitOptions::default()), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn bootstrap_requires_enough_replicates() {
        let recs = population(100, 7);
        let sim = simulate_allocations(&ThetaMatrix::zeros(), &recs, &NoiseConfig::None, 1, 1440.0).unwrap();
        assert!(matches!(bootstrap_ci(&sim, &FitOptions::default(), 50, 1), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn multi_start_picks_a_converged_fit() {
        let recs = population(400, 9);
        let truth = random_theta(4, 0.3);
        let sim = simulate_allocations(&truth, &recs, &NoiseConfig::None, 1, 1440.0).unwrap();
        let opts = FitOptions { multi_start: Some(MultiStart::default()), ..FitOptions::default() };
        let fit = fit_structural(&sim, &opts).unwrap();
        assert!(fit.converged);
        assert!(mad(&fit.flat(), &truth.flat()) < 1e-6);
    }
}
