//! A self-contained dense linear SDP solver: a primal-dual path-following
//! interior-point method with Nesterov-Todd scaling and a Mehrotra corrector,
//! over products of dense PSD blocks and nonnegative-orthant blocks.
//!
//! Complex Hermitian problems go through the real-symmetric embedding
//! H ↦ [[Re H, −Im H], [Im H, Re H]] (scaled by 1/2 so traces match), which is
//! exact for the optimal value; the extracted primal is re-symmetrized under
//! the complex structure.
//!
//! Three front-ends cover the engine's needs: plain equality-constrained
//! minimization, the feasibility projection (minimize the worst constraint
//! violation), and the penalized dual maximization used by the certificate.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};

use faer::{c64, Mat, Side};
use thiserror::Error;

use crate::fock::{self, HermitianOperator};
use crate::protocol::ConstraintSet;

#[derive(Debug, Error)]
pub enum SdpError {
    #[error("numerical failure in interior-point iteration: {0}")]
    Numerical(String),
    #[error("constraint row {index} is inconsistent with earlier rows (gap {gap:.3e})")]
    InconsistentRow { index: usize, gap: f64 },
    #[error("failed to write SDP dump: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    /// Iteration cap or a stall; best iterate returned with its residuals.
    Inaccurate,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Absolute primal feasibility target, max_i |⟨A_i,X⟩ − b_i|.
    pub tol_feas: f64,
    /// Relative duality gap target.
    pub tol_gap: f64,
    pub max_iters: usize,
    /// Fraction-to-boundary step safeguard.
    pub step_fraction: f64,
    /// When set, every solve writes its problem data to a fresh text file in
    /// this directory for offline cross-checking.
    pub dump_dir: Option<PathBuf>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol_feas: 1e-8,
            tol_gap: 1e-7,
            max_iters: 200,
            step_fraction: 0.99,
            dump_dir: None,
        }
    }
}

// ---------------------------------------------------------------------------
// block cone machinery
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConeBlock {
    Psd(usize),
    Nonneg(usize),
}

/// An element of the block space: one dense symmetric matrix per PSD block
/// plus the concatenated nonnegative-orthant entries.
#[derive(Clone)]
pub struct BlockVec {
    pub psd: Vec<Mat<f64>>,
    pub nn: Vec<f64>,
}

impl BlockVec {
    pub fn zeros(cone: &[ConeBlock]) -> Self {
        let mut psd = Vec::new();
        let mut nn_len = 0;
        for b in cone {
            match *b {
                ConeBlock::Psd(n) => psd.push(Mat::zeros(n, n)),
                ConeBlock::Nonneg(k) => nn_len += k,
            }
        }
        Self { psd, nn: vec![0.0; nn_len] }
    }

    pub fn identity_scaled(cone: &[ConeBlock], scale: f64) -> Self {
        let mut v = Self::zeros(cone);
        for m in &mut v.psd {
            let n = m.nrows();
            for i in 0..n {
                m[(i, i)] = scale;
            }
        }
        for x in &mut v.nn {
            *x = scale;
        }
        v
    }

    pub fn inner(&self, other: &BlockVec) -> f64 {
        let mut acc = 0.0;
        for (a, b) in self.psd.iter().zip(&other.psd) {
            let n = a.nrows();
            for i in 0..n {
                for j in 0..n {
                    acc += a[(i, j)] * b[(i, j)];
                }
            }
        }
        for (x, y) in self.nn.iter().zip(&other.nn) {
            acc += x * y;
        }
        acc
    }

    pub fn norm(&self) -> f64 {
        self.inner(self).sqrt()
    }

    pub fn axpy(&mut self, alpha: f64, other: &BlockVec) {
        for (a, b) in self.psd.iter_mut().zip(&other.psd) {
            let n = a.nrows();
            for i in 0..n {
                for j in 0..n {
                    a[(i, j)] += alpha * b[(i, j)];
                }
            }
        }
        for (x, y) in self.nn.iter_mut().zip(&other.nn) {
            *x += alpha * y;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.psd {
            let n = a.nrows();
            for i in 0..n {
                for j in 0..n {
                    a[(i, j)] *= alpha;
                }
            }
        }
        for x in &mut self.nn {
            *x *= alpha;
        }
    }
}

/// Sparse view of one constraint row: lower-triangle triplets per PSD block
/// (off-diagonal coefficients pre-doubled) and sparse nonneg coefficients.
struct RowSparse {
    psd: Vec<Vec<(usize, usize, f64)>>,
    nn: Vec<(usize, f64)>,
}

impl RowSparse {
    fn from_block(v: &BlockVec) -> Self {
        let mut psd = Vec::with_capacity(v.psd.len());
        for m in &v.psd {
            let n = m.nrows();
            let mut t = Vec::new();
            for i in 0..n {
                for j in 0..=i {
                    let x = m[(i, j)];
                    if x != 0.0 {
                        t.push((i, j, if i == j { x } else { 2.0 * x }));
                    }
                }
            }
            psd.push(t);
        }
        let nn = v
            .nn
            .iter()
            .enumerate()
            .filter(|(_, &x)| x != 0.0)
            .map(|(k, &x)| (k, x))
            .collect();
        Self { psd, nn }
    }

    /// ⟨A, Y⟩ for symmetric dense Y.
    fn inner_dense(&self, y: &BlockVec) -> f64 {
        let mut acc = 0.0;
        for (t, m) in self.psd.iter().zip(&y.psd) {
            for &(i, j, c) in t {
                acc += c * m[(i, j)];
            }
        }
        for &(k, c) in &self.nn {
            acc += c * y.nn[k];
        }
        acc
    }
}

/// min ⟨cost, X⟩ subject to ⟨rows_i, X⟩ = rhs_i and X in the block cone.
pub struct ConicProblem {
    pub cone: Vec<ConeBlock>,
    pub cost: BlockVec,
    pub rows: Vec<BlockVec>,
    pub rhs: Vec<f64>,
}

pub struct ConicSolution {
    pub x: BlockVec,
    pub y: Vec<f64>,
    pub s: BlockVec,
    pub primal_value: f64,
    pub dual_value: f64,
    /// max_i |⟨A_i, X⟩ − b_i|
    pub primal_residual: f64,
    /// ‖C − S − Σ y_i A_i‖_F
    pub dual_residual: f64,
    /// |primal − dual| / (1 + |primal| + |dual|)
    pub gap_rel: f64,
    /// ⟨X, S⟩
    pub complementarity: f64,
    pub status: SolveStatus,
    pub iterations: usize,
}

fn total_cone_dim(cone: &[ConeBlock]) -> usize {
    cone.iter()
        .map(|b| match *b {
            ConeBlock::Psd(n) => n,
            ConeBlock::Nonneg(k) => k,
        })
        .sum()
}

/// NT scaling data for one PSD block.
struct PsdScaling {
    r: Mat<f64>,
    w: Mat<f64>,
    s_inv: Mat<f64>,
    lambda: Vec<f64>,
    chol_x: Mat<f64>,
    chol_s: Mat<f64>,
    v_rot: Mat<f64>,
}

fn cholesky_lower(m: &Mat<f64>) -> Option<Mat<f64>> {
    m.llt(Side::Lower).ok().map(|f| f.L().to_owned())
}

fn psd_scaling(x: &Mat<f64>, s: &Mat<f64>) -> Option<PsdScaling> {
    let lx = cholesky_lower(x)?;
    let ls = cholesky_lower(s)?;
    let f = ls.transpose() * &lx;
    let svd = f.svd().ok()?;
    let (u, sv, v) = (svd.U().to_owned(), svd.S().to_owned(), svd.V().to_owned());
    let n = x.nrows();
    let mut lambda = Vec::with_capacity(n);
    for i in 0..n {
        let sv_i = sv[i].max(1e-300);
        lambda.push(sv_i);
    }
    // R = L_x · V · Σ^{-1/2}; then X = R Λ Rᵀ and S = R^{-T} Λ R^{-1}
    let mut v_scaled = Mat::<f64>::zeros(n, n);
    for j in 0..n {
        let inv_sqrt = 1.0 / lambda[j].sqrt();
        for i in 0..n {
            v_scaled[(i, j)] = v[(i, j)] * inv_sqrt;
        }
    }
    let r = &lx * &v_scaled;
    let w = &r * r.transpose();
    // S^{-1} = R Λ^{-1} Rᵀ
    let mut r_lam = Mat::<f64>::zeros(n, n);
    for j in 0..n {
        let inv = 1.0 / lambda[j];
        for i in 0..n {
            r_lam[(i, j)] = r[(i, j)] * inv;
        }
    }
    let s_inv = &r_lam * r.transpose();
    let _ = u;
    Some(PsdScaling {
        r,
        w,
        s_inv,
        lambda,
        chol_x: lx,
        chol_s: ls,
        v_rot: v,
    })
}

/// Largest t with M + t·D ⪰ 0, given the Cholesky factor of M.
fn max_psd_step(chol_m: &Mat<f64>, d: &Mat<f64>) -> f64 {
    let n = d.nrows();
    // B = L^{-1} D L^{-T}
    let mut b = d.clone();
    // solve L·Z = D in place (forward), column by column
    let l = chol_m;
    for col in 0..n {
        for i in 0..n {
            let mut acc = b[(i, col)];
            for k in 0..i {
                acc -= l[(i, k)] * b[(k, col)];
            }
            b[(i, col)] = acc / l[(i, i)];
        }
    }
    // now solve Z·L^{T} ... we need B = Z L^{-T}: B Lᵀ = Z ⟹ rows solve
    for row in 0..n {
        for j in 0..n {
            let mut acc = b[(row, j)];
            for k in 0..j {
                acc -= b[(row, k)] * l[(j, k)];
            }
            b[(row, j)] = acc / l[(j, j)];
        }
    }
    let sym = Mat::from_fn(n, n, |i, j| 0.5 * (b[(i, j)] + b[(j, i)]));
    match sym.self_adjoint_eigenvalues(Side::Lower) {
        Ok(ev) => {
            let min = ev.iter().fold(f64::INFINITY, |a, &b| a.min(b));
            if min >= 0.0 {
                f64::INFINITY
            } else {
                1.0 / (-min)
            }
        }
        Err(_) => 0.0,
    }
}

struct Scalings {
    psd: Vec<PsdScaling>,
    nn_w: Vec<f64>,
    nn_lambda: Vec<f64>,
}

fn compute_scalings(x: &BlockVec, s: &BlockVec) -> Option<Scalings> {
    let mut psd = Vec::with_capacity(x.psd.len());
    for (xm, sm) in x.psd.iter().zip(&s.psd) {
        psd.push(psd_scaling(xm, sm)?);
    }
    let mut nn_w = Vec::with_capacity(x.nn.len());
    let mut nn_lambda = Vec::with_capacity(x.nn.len());
    for (&xi, &si) in x.nn.iter().zip(&s.nn) {
        if xi <= 0.0 || si <= 0.0 {
            return None;
        }
        nn_w.push((xi / si).sqrt());
        nn_lambda.push((xi * si).sqrt());
    }
    Some(Scalings { psd, nn_w, nn_lambda })
}

/// W·V·W for the NT scaling.
fn apply_w_both(sc: &Scalings, v: &BlockVec) -> BlockVec {
    let psd = sc
        .psd
        .iter()
        .zip(&v.psd)
        .map(|(p, m)| {
            let t = &p.w * m;
            &t * &p.w
        })
        .collect();
    let nn = sc
        .nn_w
        .iter()
        .zip(&v.nn)
        .map(|(w, x)| w * w * x)
        .collect();
    BlockVec { psd, nn }
}

fn symmetrize_in_place(m: &mut Mat<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

static DUMP_COUNTER: AtomicUsize = AtomicUsize::new(0);

fn dump_problem(p: &ConicProblem, dir: &PathBuf) -> Result<(), std::io::Error> {
    use std::io::Write;
    std::fs::create_dir_all(dir)?;
    let id = DUMP_COUNTER.fetch_add(1, Ordering::SeqCst);
    let path = dir.join(format!("sdp_{id:04}.txt"));
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# conic problem: min <cost,X> s.t. <row_i,X> = rhs_i, X in cone")?;
    write!(f, "cone:")?;
    for b in &p.cone {
        match *b {
            ConeBlock::Psd(n) => write!(f, " psd:{n}")?,
            ConeBlock::Nonneg(k) => write!(f, " nonneg:{k}")?,
        }
    }
    writeln!(f)?;
    writeln!(f, "rows: {}", p.rows.len())?;
    let write_block = |f: &mut dyn Write, tag: &str, v: &BlockVec| -> std::io::Result<()> {
        for (bi, m) in v.psd.iter().enumerate() {
            let n = m.nrows();
            for i in 0..n {
                for j in 0..=i {
                    if m[(i, j)] != 0.0 {
                        writeln!(f, "{tag} psd {bi} {i} {j} {:.17e}", m[(i, j)])?;
                    }
                }
            }
        }
        for (k, &x) in v.nn.iter().enumerate() {
            if x != 0.0 {
                writeln!(f, "{tag} nn 0 {k} 0 {x:.17e}")?;
            }
        }
        Ok(())
    };
    write_block(&mut f, "cost", &p.cost)?;
    for (ri, (row, b)) in p.rows.iter().zip(&p.rhs).enumerate() {
        writeln!(f, "rhs {ri} {b:.17e}")?;
        write_block(&mut f, &format!("row {ri}"), row)?;
    }
    Ok(())
}

/// Core interior-point loop.
pub fn solve_conic(problem: &ConicProblem, opts: &SolverOptions) -> Result<ConicSolution, SdpError> {
    fock::init_linalg();
    if let Some(dir) = &opts.dump_dir {
        dump_problem(problem, dir)?;
    }
    let m = problem.rows.len();
    let cone = &problem.cone;
    let nu = total_cone_dim(cone) as f64;

    // row/cost normalization; solved in scaled data, reported on the original
    let row_scale: Vec<f64> = problem.rows.iter().map(|r| r.norm().max(1.0)).collect();
    let cost_scale = problem.cost.norm().max(1.0);
    let mut cost = problem.cost.clone();
    cost.scale(1.0 / cost_scale);
    let rows: Vec<BlockVec> = problem
        .rows
        .iter()
        .zip(&row_scale)
        .map(|(r, s)| {
            let mut r = r.clone();
            r.scale(1.0 / s);
            r
        })
        .collect();
    let rhs: Vec<f64> = problem.rhs.iter().zip(&row_scale).map(|(b, s)| b / s).collect();
    let sparse: Vec<RowSparse> = rows.iter().map(RowSparse::from_block).collect();
    let sparse_orig: Vec<RowSparse> = problem.rows.iter().map(RowSparse::from_block).collect();

    let b_inf = rhs.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let xi_p = nu.sqrt().max(10.0) * (1.0 + b_inf);
    let xi_d = nu.sqrt().max(10.0);
    let mut x = BlockVec::identity_scaled(cone, xi_p);
    let mut s = BlockVec::identity_scaled(cone, xi_d);
    let mut y = vec![0.0; m];

    let unscaled_report = |x: &BlockVec, y: &[f64], s: &BlockVec| {
        // y_true_i = y_i · cost_scale / row_scale_i ; S_true = cost_scale · S
        let y_true: Vec<f64> = y
            .iter()
            .zip(&row_scale)
            .map(|(yi, si)| yi * cost_scale / si)
            .collect();
        let pval = problem.cost.inner(x);
        let dval: f64 = y_true.iter().zip(&problem.rhs).map(|(a, b)| a * b).sum();
        let pres = sparse_orig
            .iter()
            .zip(&problem.rhs)
            .map(|(r, b)| (r.inner_dense(x) - b).abs())
            .fold(0.0f64, f64::max);
        let mut rd = problem.cost.clone();
        let mut s_true = s.clone();
        s_true.scale(cost_scale);
        rd.axpy(-1.0, &s_true);
        for (yi, row) in y_true.iter().zip(&problem.rows) {
            rd.axpy(-yi, row);
        }
        let dres = rd.norm();
        let gap = (pval - dval).abs() / (1.0 + pval.abs() + dval.abs());
        (y_true, s_true, pval, dval, pres, dres, gap)
    };

    let mut status = SolveStatus::Inaccurate;
    let mut iters_done = 0;
    let cost_norm = 1.0 + problem.cost.norm();

    for iter in 0..opts.max_iters {
        iters_done = iter;
        // residuals in scaled space
        let mut r_p = vec![0.0; m];
        for i in 0..m {
            r_p[i] = rhs[i] - sparse[i].inner_dense(&x);
        }
        let mut r_d = cost.clone();
        r_d.axpy(-1.0, &s);
        for (yi, row) in y.iter().zip(&rows) {
            r_d.axpy(-yi, row);
        }
        let mu = x.inner(&s) / nu;

        // convergence on original data
        let (_yt, _st, pval, dval, pres, dres, gap) = unscaled_report(&x, &y, &s);
        if pres <= opts.tol_feas && dres <= opts.tol_feas * cost_norm && gap <= opts.tol_gap {
            status = SolveStatus::Optimal;
            break;
        }
        // crude divergence certificates
        let y_norm = y.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        if y_norm > 1e12 && pres > 1e-4 {
            status = SolveStatus::Infeasible;
            break;
        }
        if pval < -1e14 {
            status = SolveStatus::Unbounded;
            break;
        }
        if mu < 1e-16 {
            break;
        }

        let sc = match compute_scalings(&x, &s) {
            Some(sc) => sc,
            None => break, // iterate left the cone numerically; report best so far
        };

        // Schur complement M_ij = <A_i, W A_j W>
        let mut schur = Mat::<f64>::zeros(m, m);
        let mut waw = Vec::with_capacity(m);
        for j in 0..m {
            let wj = apply_w_both(&sc, &rows[j]);
            for i in 0..=j {
                let v = sparse[i].inner_dense(&wj);
                schur[(i, j)] = v;
                schur[(j, i)] = v;
            }
            waw.push(wj);
        }
        // factor with escalating ridge if needed
        let mut ridge = 0.0;
        let chol = loop {
            let try_m = if ridge == 0.0 {
                schur.clone()
            } else {
                let mut t = schur.clone();
                for i in 0..m {
                    t[(i, i)] += ridge;
                }
                t
            };
            match cholesky_lower(&try_m) {
                Some(l) => break l,
                None => {
                    ridge = if ridge == 0.0 { 1e-14 * (1.0 + schur[(0, 0)].abs()) } else { ridge * 100.0 };
                    if ridge > 1.0 {
                        return Err(SdpError::Numerical(
                            "Schur complement not positive definite".into(),
                        ));
                    }
                }
            }
        };
        let solve_schur = |rhs_vec: &[f64]| -> Vec<f64> {
            let mut v = rhs_vec.to_vec();
            for i in 0..m {
                let mut acc = v[i];
                for k in 0..i {
                    acc -= chol[(i, k)] * v[k];
                }
                v[i] = acc / chol[(i, i)];
            }
            for i in (0..m).rev() {
                let mut acc = v[i];
                for k in (i + 1)..m {
                    acc -= chol[(k, i)] * v[k];
                }
                v[i] = acc / chol[(i, i)];
            }
            v
        };

        let w_rd_w = apply_w_both(&sc, &r_d);

        // predictor (affine scaling) direction
        let rhs_aff: Vec<f64> = (0..m)
            .map(|i| rhs[i] + sparse[i].inner_dense(&w_rd_w))
            .collect();
        let dy_aff = solve_schur(&rhs_aff);
        let mut ds_aff = r_d.clone();
        for (dyi, row) in dy_aff.iter().zip(&rows) {
            ds_aff.axpy(-dyi, row);
        }
        let mut dx_aff = apply_w_both(&sc, &ds_aff);
        dx_aff.scale(-1.0);
        dx_aff.axpy(-1.0, &x);
        for mmat in &mut dx_aff.psd {
            symmetrize_in_place(mmat);
        }

        let max_step = |v: &BlockVec, dv: &BlockVec, chols: &[&Mat<f64>]| -> f64 {
            let mut a = f64::INFINITY;
            for ((_vm, dm), l) in v.psd.iter().zip(&dv.psd).zip(chols) {
                a = a.min(max_psd_step(l, dm));
            }
            for (&vi, &di) in v.nn.iter().zip(&dv.nn) {
                if di < 0.0 {
                    a = a.min(-vi / di);
                }
            }
            a
        };
        let chols_x: Vec<&Mat<f64>> = sc.psd.iter().map(|p| &p.chol_x).collect();
        let chols_s: Vec<&Mat<f64>> = sc.psd.iter().map(|p| &p.chol_s).collect();
        let ap_aff = max_step(&x, &dx_aff, &chols_x).min(1.0);
        let ad_aff = max_step(&s, &ds_aff, &chols_s).min(1.0);

        let mut x_aff = x.clone();
        x_aff.axpy(ap_aff * opts.step_fraction, &dx_aff);
        let mut s_aff = s.clone();
        s_aff.axpy(ad_aff * opts.step_fraction, &ds_aff);
        let mu_aff = x_aff.inner(&s_aff) / nu;
        let sigma = (mu_aff / mu).max(0.0).powi(3).clamp(1e-10, 1.0);

        // corrector: E = σμ S^{-1} − X − R·Corr·Rᵀ with the scaled second-order term
        let mut e = BlockVec::zeros(cone);
        for (bi, p) in sc.psd.iter().enumerate() {
            let n = p.r.nrows();
            // scaled affine directions: Δx̄ = R^{-1} ΔX R^{-T}, Δs̄ = Rᵀ ΔS R
            // R^{-1} = Σ^{1/2} Vᵀ L_x^{-1}
            let dxm = &dx_aff.psd[bi];
            let dsm = &ds_aff.psd[bi];
            let lx = &p.chol_x;
            // Z = L_x^{-1} ΔX L_x^{-T}
            let mut z = dxm.clone();
            for col in 0..n {
                for i in 0..n {
                    let mut acc = z[(i, col)];
                    for k in 0..i {
                        acc -= lx[(i, k)] * z[(k, col)];
                    }
                    z[(i, col)] = acc / lx[(i, i)];
                }
            }
            for row in 0..n {
                for j in 0..n {
                    let mut acc = z[(row, j)];
                    for k in 0..j {
                        acc -= z[(row, k)] * lx[(j, k)];
                    }
                    z[(row, j)] = acc / lx[(j, j)];
                }
            }
            // Δx̄ = Σ^{1/2} Vᵀ Z V Σ^{1/2}
            let vt_z_v = p.v_rot.transpose() * &z * &p.v_rot;
            let dx_bar = Mat::from_fn(n, n, |i, j| {
                vt_z_v[(i, j)] * (p.lambda[i].sqrt() * p.lambda[j].sqrt())
            });
            let ds_bar_inner = p.r.transpose() * dsm * &p.r;
            // Q = sym(Δx̄ Δs̄)
            let q_raw = &dx_bar * &ds_bar_inner;
            let corr = Mat::from_fn(n, n, |i, j| {
                let q = 0.5 * (q_raw[(i, j)] + q_raw[(j, i)]);
                let diag = if i == j { sigma * mu / p.lambda[i] - p.lambda[i] } else { 0.0 };
                diag - 2.0 * q / (p.lambda[i] + p.lambda[j])
            });
            // E = R (diag part − Corr) Rᵀ; diag part already folded into corr
            let em = &p.r * &corr * p.r.transpose();
            e.psd[bi] = em;
        }
        let nn_off = 0;
        for k in 0..x.nn.len() {
            let si = s.nn[k];
            e.nn[nn_off + k] =
                sigma * mu / si - x.nn[k] - dx_aff.nn[k] * ds_aff.nn[k] / si;
        }

        let rhs_cor: Vec<f64> = (0..m)
            .map(|i| {
                r_p[i] - sparse[i].inner_dense(&e) + sparse[i].inner_dense(&w_rd_w)
            })
            .collect();
        let dy = solve_schur(&rhs_cor);
        let mut ds = r_d.clone();
        for (dyi, row) in dy.iter().zip(&rows) {
            ds.axpy(-dyi, row);
        }
        let mut dx = apply_w_both(&sc, &ds);
        dx.scale(-1.0);
        dx.axpy(1.0, &e);
        for mmat in &mut dx.psd {
            symmetrize_in_place(mmat);
        }

        let ap = (opts.step_fraction * max_step(&x, &dx, &chols_x)).min(1.0);
        let ad = (opts.step_fraction * max_step(&s, &ds, &chols_s)).min(1.0);
        if ap < 1e-10 && ad < 1e-10 {
            break; // stalled
        }
        x.axpy(ap, &dx);
        for (yi, dyi) in y.iter_mut().zip(&dy) {
            *yi += ad * dyi;
        }
        s.axpy(ad, &ds);
        iters_done = iter + 1;
    }

    let (y_true, s_true, pval, dval, pres, dres, gap) = unscaled_report(&x, &y, &s);
    if status != SolveStatus::Optimal
        && pres <= opts.tol_feas
        && dres <= opts.tol_feas * cost_norm
        && gap <= opts.tol_gap
    {
        status = SolveStatus::Optimal;
    }
    Ok(ConicSolution {
        complementarity: x.inner(&s_true),
        x,
        y: y_true,
        s: s_true,
        primal_value: pval,
        dual_value: dval,
        primal_residual: pres,
        dual_residual: dres,
        gap_rel: gap,
        status,
        iterations: iters_done,
    })
}

// ---------------------------------------------------------------------------
// complex Hermitian layer
// ---------------------------------------------------------------------------

/// [[Re H, −Im H], [Im H, Re H]] / 2, so that ⟨embed(A), embed(B)⟩ matches
/// Tr[A·B]/… — with the 1/2 applied to exactly one operand of every pairing we
/// instead fold it here once: ⟨embed_half(A), embed_full(B)⟩ = Re Tr[A·B].
fn embed_half(h: &HermitianOperator) -> Mat<f64> {
    let n = h.dim();
    Mat::from_fn(2 * n, 2 * n, |i, j| {
        let v = h.entry(i % n, j % n);
        0.5 * match (i >= n, j >= n) {
            (false, false) | (true, true) => v.re,
            (false, true) => -v.im,
            (true, false) => v.im,
        }
    })
}

/// Extracts the complex Hermitian matrix represented by a real PSD iterate,
/// averaging over the complex structure.
fn extract_hermitian(x: &Mat<f64>, n: usize) -> HermitianOperator {
    HermitianOperator::from_fn(n, |i, j| {
        let re = 0.5 * (x[(i, j)] + x[(i + n, j + n)]);
        let im = 0.5 * (x[(i + n, j)] - x[(i, j + n)]);
        c64::new(re, im)
    })
}

/// A linear-objective PSD-cone problem over a complex Hermitian variable.
pub struct LinearSdp {
    pub cost: HermitianOperator,
    pub equalities: Vec<(HermitianOperator, f64)>,
    /// Optional scalar rows Tr[Aρ] ≤ u, reduced internally to conic form.
    pub inequalities: Vec<(HermitianOperator, f64)>,
}

/// Primal/dual solution of a [`LinearSdp`] with certified residuals.
pub struct SdpSolution {
    pub x: HermitianOperator,
    /// Multipliers for the equality rows, in input order (after dropped rows
    /// are re-inserted as zeros).
    pub y: Vec<f64>,
    pub value: f64,
    pub dual_value: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
    pub complementarity: f64,
    pub status: SolveStatus,
    pub iterations: usize,
}

/// Gram-based rank-revealing pass; returns the indices to keep. Dependent rows
/// with consistent right-hand sides are dropped with a warning; inconsistent
/// ones are an error.
fn independent_rows(
    rows: &[(HermitianOperator, f64)],
) -> Result<Vec<usize>, SdpError> {
    let m = rows.len();
    let mut kept: Vec<usize> = Vec::new();
    // factors of the Gram matrix of the kept rows (lower-triangular L with
    // kept-row order), plus coefficients to express dropped rows
    let mut l: Vec<Vec<f64>> = Vec::new();
    for i in 0..m {
        let gi = rows[i].0.inner(&rows[i].0);
        let mut coys = Vec::with_capacity(kept.len());
        for (kidx, &k) in kept.iter().enumerate() {
            let mut g = rows[i].0.inner(&rows[k].0);
            for t in 0..kidx {
                g -= l[kidx][t] * coys[t];
            }
            coys.push(g / l[kidx][kidx]);
        }
        let res2 = gi - coys.iter().map(|c| c * c).sum::<f64>();
        if res2 > 1e-12 * gi.max(1e-300) {
            l.push({
                let mut row = coys.clone();
                row.push(res2.max(0.0).sqrt());
                row
            });
            kept.push(i);
        } else {
            // dependent: coefficients in the kept basis are solved from Lᵀ c = coys
            let k = kept.len();
            let mut c = coys.clone();
            for t in (0..k).rev() {
                for u in (t + 1)..k {
                    c[t] -= l[u][t] * c[u];
                }
                c[t] /= l[t][t];
            }
            let predicted_b: f64 = c.iter().zip(&kept).map(|(ci, &ki)| ci * rows[ki].1).sum();
            let gap = (predicted_b - rows[i].1).abs();
            if gap > 1e-8 * (1.0 + rows[i].1.abs()) {
                return Err(SdpError::InconsistentRow { index: i, gap });
            }
            log::warn!(
                "dropping linearly dependent constraint row {i} (consistent, gap {gap:.2e})"
            );
        }
    }
    Ok(kept)
}

/// Solve a complex-Hermitian-variable linear SDP via the real embedding.
pub fn solve(problem: &LinearSdp, opts: &SolverOptions) -> Result<SdpSolution, SdpError> {
    let n = problem.cost.dim();
    let kept = independent_rows(&problem.equalities)?;
    let n_ineq = problem.inequalities.len();
    let mut cone = vec![ConeBlock::Psd(2 * n)];
    if n_ineq > 0 {
        cone.push(ConeBlock::Nonneg(n_ineq));
    }
    let mut cost = BlockVec::zeros(&cone);
    cost.psd[0] = embed_half(&problem.cost);
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for &k in &kept {
        let (a, b) = &problem.equalities[k];
        let mut r = BlockVec::zeros(&cone);
        r.psd[0] = embed_half(a);
        rows.push(r);
        rhs.push(*b);
    }
    for (idx, (a, u)) in problem.inequalities.iter().enumerate() {
        let mut r = BlockVec::zeros(&cone);
        r.psd[0] = embed_half(a);
        r.nn[idx] = 1.0;
        rows.push(r);
        rhs.push(*u);
    }
    let conic = ConicProblem { cone, cost, rows, rhs };
    let sol = solve_conic(&conic, opts)?;
    let x = extract_hermitian(&sol.x.psd[0], n);
    let mut y = vec![0.0; problem.equalities.len()];
    for (pos, &k) in kept.iter().enumerate() {
        y[k] = sol.y[pos];
    }
    Ok(SdpSolution {
        x,
        y,
        value: sol.primal_value,
        dual_value: sol.dual_value,
        primal_residual: sol.primal_residual,
        dual_residual: sol.dual_residual,
        gap: sol.gap_rel,
        complementarity: sol.complementarity,
        status: sol.status,
        iterations: sol.iterations,
    })
}

// ---------------------------------------------------------------------------
// engine front-ends
// ---------------------------------------------------------------------------

/// Result of the linearized subproblem min ⟨grad, σ⟩ over the feasible set.
pub struct FwStep {
    /// The optimizing feasible point σ*.
    pub sigma: HermitianOperator,
    /// Δρ = σ* − ρ_k.
    pub delta: HermitianOperator,
    /// ⟨grad, Δρ⟩, the stopping-rule value (≤ 0 away from optimality).
    pub predicted_decrease: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub primal_residual: f64,
}

/// Linearized step: arg min Tr[Δρ·grad] subject to ρ_k + Δρ feasible and PSD.
pub fn solve_fw_subproblem(
    gradient: &HermitianOperator,
    constraints: &ConstraintSet,
    rho_k: &HermitianOperator,
    opts: &SolverOptions,
) -> Result<FwStep, SdpError> {
    let problem = LinearSdp {
        cost: gradient.clone(),
        equalities: constraints
            .constraints
            .iter()
            .map(|c| (c.op.clone(), c.value))
            .collect(),
        inequalities: Vec::new(),
    };
    let sol = solve(&problem, opts)?;
    let delta = sol.x.sub(rho_k);
    let predicted_decrease = gradient.inner(&delta);
    Ok(FwStep {
        sigma: sol.x,
        delta,
        predicted_decrease,
        status: sol.status,
        iterations: sol.iterations,
        primal_residual: sol.primal_residual,
    })
}

/// A feasible dual point of the penalized linearization, certifying
/// max (γ·y − ε'·Σz) over −z ≤ y ≤ z, Σ y_i Γ_i ⪯ grad.
pub struct DualCertificate {
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    /// γ·y − ε'·Σ_i z_i at the returned point.
    pub value: f64,
    /// min eigenvalue of grad − Σ y_i Γ_i, verified a posteriori.
    pub slack_min_eig: f64,
    pub status: SolveStatus,
    pub iterations: usize,
}

pub fn solve_step2_dual(
    gradient: &HermitianOperator,
    constraints: &ConstraintSet,
    eps_prime: f64,
    opts: &SolverOptions,
) -> Result<DualCertificate, SdpError> {
    let m = constraints.len();
    let n = gradient.dim();
    let eps_eff = eps_prime.max(1e-14);
    // expressed through the solver's primal so that the engine's dual variables
    // (y, z) come back as equality multipliers:
    //   min ⟨grad, X⟩ + Σ(0·u + 0·v)  s.t. ⟨Γ_i, X⟩ + u_i − v_i = γ_i,
    //                                      u_i + v_i = ε',  X ⪰ 0, u, v ≥ 0
    let cone = vec![ConeBlock::Psd(2 * n), ConeBlock::Nonneg(2 * m)];
    let mut cost = BlockVec::zeros(&cone);
    cost.psd[0] = embed_half(gradient);
    let mut rows = Vec::with_capacity(2 * m);
    let mut rhs = Vec::with_capacity(2 * m);
    for (i, c) in constraints.constraints.iter().enumerate() {
        let mut r = BlockVec::zeros(&cone);
        r.psd[0] = embed_half(&c.op);
        r.nn[i] = 1.0;
        r.nn[m + i] = -1.0;
        rows.push(r);
        rhs.push(c.value);
    }
    for i in 0..m {
        let mut r = BlockVec::zeros(&cone);
        r.nn[i] = 1.0;
        r.nn[m + i] = 1.0;
        rows.push(r);
        rhs.push(eps_eff);
    }
    let conic = ConicProblem { cone, cost, rows, rhs };
    let sol = solve_conic(&conic, opts)?;
    let y: Vec<f64> = sol.y[..m].to_vec();
    // the multiplier of u_i + v_i = ε' plays −z_i; enforce z ≥ |y| exactly,
    // which can only lower the certified value
    let z: Vec<f64> = (0..m).map(|i| (-sol.y[m + i]).max(y[i].abs())).collect();
    let value = y
        .iter()
        .zip(&constraints.constraints)
        .map(|(yi, c)| yi * c.value)
        .sum::<f64>()
        - eps_prime * z.iter().sum::<f64>();
    let mut slack = gradient.clone();
    for (yi, c) in y.iter().zip(&constraints.constraints) {
        slack = slack.sub(&c.op.scaled(*yi));
    }
    let slack_min_eig = slack
        .min_eigenvalue()
        .map_err(|e| SdpError::Numerical(format!("slack eigendecomposition: {e}")))?;
    Ok(DualCertificate {
        y,
        z,
        value,
        slack_min_eig,
        status: sol.status,
        iterations: sol.iterations,
    })
}

/// Outcome of the feasibility projection min t s.t. |Tr[Γ_iρ] − γ_i| ≤ t, ρ ⪰ 0.
pub struct FeasibilityOutcome {
    pub rho: HermitianOperator,
    /// The optimal t: an upper bound on the worst constraint violation.
    pub violation_bound: f64,
    pub status: SolveStatus,
    pub iterations: usize,
}

pub fn solve_feasibility(
    constraints: &ConstraintSet,
    dim: usize,
    opts: &SolverOptions,
) -> Result<FeasibilityOutcome, SdpError> {
    let m = constraints.len();
    // variables: X (embedded), t ≥ 0, slacks v_i, w_i ≥ 0
    let cone = vec![ConeBlock::Psd(2 * dim), ConeBlock::Nonneg(1 + 2 * m)];
    let mut cost = BlockVec::zeros(&cone);
    cost.nn[0] = 1.0;
    let mut rows = Vec::with_capacity(2 * m);
    let mut rhs = Vec::with_capacity(2 * m);
    for (i, c) in constraints.constraints.iter().enumerate() {
        // Tr[Γρ] − t + v_i = γ
        let mut r = BlockVec::zeros(&cone);
        r.psd[0] = embed_half(&c.op);
        r.nn[0] = -1.0;
        r.nn[1 + i] = 1.0;
        rows.push(r);
        rhs.push(c.value);
        // Tr[Γρ] + t − w_i = γ
        let mut r = BlockVec::zeros(&cone);
        r.psd[0] = embed_half(&c.op);
        r.nn[0] = 1.0;
        r.nn[1 + m + i] = -1.0;
        rows.push(r);
        rhs.push(c.value);
    }
    let conic = ConicProblem { cone, cost, rows, rhs };
    let sol = solve_conic(&conic, opts)?;
    let rho = extract_hermitian(&sol.x.psd[0], dim);
    Ok(FeasibilityOutcome {
        rho,
        violation_bound: sol.x.nn[0],
        status: sol.status,
        iterations: sol.iterations,
    })
}
