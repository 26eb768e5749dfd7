//! The 8PSK / QPSK protocol model: configuration, closed-form key-map region
//! operators, the source-replacement Gram matrix, the Kraus and pinching maps,
//! expected channel statistics, and the full constraint set of the key-rate
//! optimization.

use faer::{c64, Mat};
use thiserror::Error;

use crate::fock::{self, HermitianOperator};
use crate::special::{factorial, upper_incomplete_gamma};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("region operator R_{z} is not positive semidefinite (min eigenvalue {min_eig:.3e})")]
    RegionNotPsd { z: usize, min_eig: f64 },
    #[error("no feasible state within tolerance: feasibility optimum t = {t:.3e} > 1e-6 (cutoff too small for the given α, ξ?)")]
    InfeasibleConfiguration { t: f64 },
    #[error("initial-state projection failed: {0}")]
    InitialStateFailed(String),
    #[error(transparent)]
    Fock(#[from] crate::fock::FockError),
}

/// All physical and numerical parameters of a single key-rate computation.
#[derive(Debug, Clone)]
pub struct ProtocolConfig {
    /// Number of signal states on the phase-space circle (8 or 4).
    pub num_states: usize,
    /// Coherent-state amplitude |α| > 0.
    pub alpha: f64,
    /// State preparation probabilities; uniform by default.
    pub probs: Vec<f64>,
    /// Fiber length in km; transmittance is 10^(-0.02 L) unless overridden.
    pub distance_km: f64,
    /// Direct transmittance override (takes precedence over `distance_km`).
    pub eta_override: Option<f64>,
    /// Excess noise ξ in shot-noise units.
    pub excess_noise: f64,
    /// Reconciliation efficiency β ∈ (0, 1].
    pub recon_efficiency: f64,
    /// Radial postselection parameter Δ_r ≥ 0.
    pub delta_r: f64,
    /// Angular postselection parameter Δ_a ∈ [0, π/num_states); experimental,
    /// defaults to 0.
    pub delta_a: f64,
    /// Photon-number cutoff N_c; Bob's space has dimension N_c + 1.
    pub n_cutoff: usize,
    /// Frank-Wolfe stopping threshold ε_FW.
    pub fw_threshold: f64,
    /// Frank-Wolfe iteration cap N_FW.
    pub fw_max_iters: usize,
    /// Objective perturbation ε̃ ∈ (0, 1).
    pub perturbation: f64,
    /// Perturbation ε used by the lower-bound theorem; derived from ε̃ and the
    /// image dimension when not set.
    pub theorem_epsilon: Option<f64>,
}

impl ProtocolConfig {
    /// A config with the reference defaults: uniform priors, no postselection,
    /// N_c = 14, ε_FW = 1e-7, N_FW = 200, ε̃ = 1e-11.
    pub fn new(num_states: usize, alpha: f64) -> Self {
        Self {
            num_states,
            alpha,
            probs: vec![1.0 / num_states as f64; num_states],
            distance_km: 0.0,
            eta_override: None,
            excess_noise: 0.0,
            recon_efficiency: 0.95,
            delta_r: 0.0,
            delta_a: 0.0,
            n_cutoff: 14,
            fw_threshold: 1e-7,
            fw_max_iters: 200,
            perturbation: 1e-11,
            theorem_epsilon: None,
        }
    }

    pub fn eta(&self) -> f64 {
        self.eta_override
            .unwrap_or_else(|| 10f64.powf(-0.02 * self.distance_km))
    }

    pub fn dim_a(&self) -> usize {
        self.num_states
    }

    pub fn dim_b(&self) -> usize {
        self.n_cutoff + 1
    }

    pub fn dim_ab(&self) -> usize {
        self.dim_a() * self.dim_b()
    }

    /// Dimension of the image space of the postprocessing map G.
    pub fn dim_g(&self) -> usize {
        self.num_states * self.dim_ab()
    }

    /// Angular step between neighbouring signal states (π/4 for 8PSK).
    pub fn phase_step(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.num_states as f64
    }

    /// Half-width of a key-map wedge after angular postselection.
    pub fn wedge_half_width(&self) -> f64 {
        std::f64::consts::PI / self.num_states as f64 - self.delta_a
    }

    /// α_x = |α|·e^{i x·phase_step}.
    pub fn signal_amplitude(&self, x: usize) -> c64 {
        let phi = self.phase_step() * x as f64;
        c64::new(self.alpha * phi.cos(), self.alpha * phi.sin())
    }

    /// The ε of the lower-bound theorem: max(ε̃·dim_G, 1e-10) unless overridden.
    pub fn theorem_eps(&self) -> f64 {
        self.theorem_epsilon
            .unwrap_or_else(|| (self.perturbation * self.dim_g() as f64).max(1e-10))
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |field: &'static str, reason: String| {
            Err(ProtocolError::InvalidConfig { field, reason })
        };
        if self.num_states != 8 && self.num_states != 4 {
            return bad("num_states", format!("must be 8 or 4, got {}", self.num_states));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha", format!("must be positive and finite, got {}", self.alpha));
        }
        if self.probs.len() != self.num_states {
            return bad("probs", format!("need {} entries, got {}", self.num_states, self.probs.len()));
        }
        if self.probs.iter().any(|&p| p <= 0.0) {
            return bad("probs", "all entries must be positive".into());
        }
        let sum: f64 = self.probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return bad("probs", format!("must sum to 1 within 1e-12, got {sum}"));
        }
        if !(self.distance_km >= 0.0 && self.distance_km.is_finite()) {
            return bad("L_km", format!("must be nonnegative, got {}", self.distance_km));
        }
        let eta = self.eta();
        if !(eta > 0.0 && eta <= 1.0) {
            return bad("eta", format!("must be in (0, 1], got {eta}"));
        }
        if !(self.excess_noise >= 0.0 && self.excess_noise.is_finite()) {
            return bad("xi", format!("must be nonnegative, got {}", self.excess_noise));
        }
        if !(self.recon_efficiency > 0.0 && self.recon_efficiency <= 1.0) {
            return bad("beta", format!("must be in (0, 1], got {}", self.recon_efficiency));
        }
        if !(self.delta_r >= 0.0 && self.delta_r.is_finite()) {
            return bad("delta_r", format!("must be nonnegative, got {}", self.delta_r));
        }
        if !(self.delta_a >= 0.0 && self.delta_a < std::f64::consts::PI / self.num_states as f64) {
            return bad("delta_a", format!("must lie in [0, π/{}), got {}", self.num_states, self.delta_a));
        }
        if self.n_cutoff < 4 {
            return bad("n_cutoff", format!("must be at least 4, got {}", self.n_cutoff));
        }
        if !(self.fw_threshold > 0.0) {
            return bad("fw_threshold", "must be positive".into());
        }
        if self.fw_max_iters == 0 {
            return bad("fw_max_iters", "must be at least 1".into());
        }
        if !(self.perturbation > 0.0 && self.perturbation < 1.0) {
            return bad("perturbation", format!("must lie in (0, 1), got {}", self.perturbation));
        }
        let eps = self.theorem_eps();
        let eps_max = 1.0 / (std::f64::consts::E * (self.dim_g() as f64 - 1.0));
        if !(eps > 0.0 && eps <= eps_max) {
            return bad(
                "theorem_epsilon",
                format!("must lie in (0, {eps_max:.3e}], got {eps:.3e}"),
            );
        }
        Ok(())
    }
}

/// ⟨n|R_z|m⟩ in closed form. The diagonal carries Γ(n+1, Δ_r²)/n!·(w/π) and the
/// off-diagonal Γ((m+n)/2+1, Δ_r²)·sin(w(m−n))/(π(m−n)√(n!m!)), both times the
/// wedge-center phase e^{-i(m−n)z·φ}, with w the wedge half-width and φ the
/// angular step.
pub fn region_operator_element(z: usize, n: usize, m: usize, cfg: &ProtocolConfig) -> c64 {
    assert!(z < cfg.num_states, "symbol out of range");
    assert!(n <= cfg.n_cutoff && m <= cfg.n_cutoff, "Fock index beyond cutoff");
    let w = cfg.wedge_half_width();
    let x = cfg.delta_r * cfg.delta_r;
    let phase_angle = -(m as f64 - n as f64) * z as f64 * cfg.phase_step();
    let phase = c64::new(phase_angle.cos(), phase_angle.sin());
    let magnitude = if n == m {
        upper_incomplete_gamma(2 * n as u32 + 2, x) / factorial(n as u32) * w
    } else {
        let gamma = upper_incomplete_gamma((m + n + 2) as u32, x);
        let denom = (m as f64 - n as f64)
            * factorial(n as u32).sqrt()
            * factorial(m as u32).sqrt();
        gamma / denom * (w * (m as f64 - n as f64)).sin()
    };
    phase * (magnitude / std::f64::consts::PI)
}

/// The key-map POVM elements R_0..R_{num_states−1} on Bob's truncated space.
#[derive(Debug, Clone)]
pub struct RegionOperatorSet {
    pub ops: Vec<HermitianOperator>,
}

impl RegionOperatorSet {
    /// Σ_z R_z on the B space.
    pub fn sum(&self) -> HermitianOperator {
        let mut acc = HermitianOperator::zeros(self.ops[0].dim());
        for op in &self.ops {
            acc = acc.add(op);
        }
        acc
    }
}

pub fn build_region_operators(cfg: &ProtocolConfig) -> RegionOperatorSet {
    let d = cfg.dim_b();
    let ops = (0..cfg.num_states)
        .map(|z| HermitianOperator::from_fn(d, |n, m| region_operator_element(z, n, m, cfg)))
        .collect();
    RegionOperatorSet { ops }
}

/// Tr_B of the source-replacement state: entries √(p_x p_y)·⟨ψ_y|ψ_x⟩ from the
/// exact (untruncated) coherent overlaps.
pub fn gram_matrix(cfg: &ProtocolConfig) -> HermitianOperator {
    let a2 = cfg.alpha * cfg.alpha;
    let phi = cfg.phase_step();
    HermitianOperator::from_fn(cfg.num_states, |x, y| {
        let delta = (x as f64 - y as f64) * phi;
        // exp(|α|²(e^{iΔ} − 1))
        let ex = c64::new(a2 * (delta.cos() - 1.0), a2 * delta.sin());
        let w = (cfg.probs[x] * cfg.probs[y]).sqrt();
        c64::new(ex.re.exp() * ex.im.cos(), ex.re.exp() * ex.im.sin()) * w
    })
}

/// Expected heterodyne statistics of the phase-invariant Gaussian channel for
/// signal x: (⟨q̂⟩, ⟨p̂⟩, ⟨n̂⟩, ⟨d̂⟩).
pub fn channel_expectations(x: usize, cfg: &ProtocolConfig) -> (f64, f64, f64, f64) {
    let eta = cfg.eta();
    let ax = cfg.signal_amplitude(x);
    let q = (2.0 * eta).sqrt() * ax.re;
    let p = (2.0 * eta).sqrt() * ax.im;
    let n = eta * ax.norm_sqr() + eta * cfg.excess_noise / 2.0;
    let ax2 = ax * ax;
    let d = eta * 2.0 * ax2.re; // α² + (α*)² = 2 Re(α²)
    (q, p, n, d)
}

/// One scalar constraint Tr[Γ ρ] = γ of the feasible set.
#[derive(Debug, Clone)]
pub struct Constraint {
    pub op: HermitianOperator,
    pub value: f64,
    pub label: String,
}

/// The ordered constraint list: num_states·4 measurement rows (x-major, then
/// q, p, n, d), followed by num_states² tomography rows (diagonals ascending,
/// then pairs lexicographic, real before imaginary). The trace-equals-one row
/// is deliberately not included; it is a linear combination of the tomography
/// diagonals.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    pub constraints: Vec<Constraint>,
}

impl ConstraintSet {
    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    /// max_i |Tr[Γ_i ρ] − γ_i|.
    pub fn max_violation(&self, rho: &HermitianOperator) -> f64 {
        self.constraints
            .iter()
            .map(|c| (c.op.inner(rho) - c.value).abs())
            .fold(0.0, f64::max)
    }
}

fn basis_projector_a(x: usize, dim_a: usize) -> HermitianOperator {
    HermitianOperator::from_fn(dim_a, |i, j| {
        if i == x && j == x {
            c64::new(1.0, 0.0)
        } else {
            c64::new(0.0, 0.0)
        }
    })
}

/// The num_states² scalar rows that pin Tr_B of the state to the Gram matrix.
pub fn tomography_constraints(cfg: &ProtocolConfig) -> Vec<Constraint> {
    let da = cfg.dim_a();
    let ib = HermitianOperator::identity(cfg.dim_b());
    let gram = gram_matrix(cfg);
    let mut rows = Vec::with_capacity(da * da);
    for x in 0..da {
        rows.push(Constraint {
            op: fock::kron(&basis_projector_a(x, da), &ib),
            value: cfg.probs[x],
            label: format!("tomo_diag_{x}"),
        });
    }
    for x in 0..da {
        for y in (x + 1)..da {
            let g = gram.entry(x, y);
            let re_a = HermitianOperator::from_fn(da, |i, j| {
                if (i, j) == (x, y) || (i, j) == (y, x) {
                    c64::new(1.0, 0.0)
                } else {
                    c64::new(0.0, 0.0)
                }
            });
            rows.push(Constraint {
                op: fock::kron(&re_a, &ib),
                value: 2.0 * g.re,
                label: format!("tomo_re_{x}_{y}"),
            });
            let im_a = HermitianOperator::from_fn(da, |i, j| {
                if (i, j) == (x, y) {
                    c64::new(0.0, 1.0)
                } else if (i, j) == (y, x) {
                    c64::new(0.0, -1.0)
                } else {
                    c64::new(0.0, 0.0)
                }
            });
            rows.push(Constraint {
                op: fock::kron(&im_a, &ib),
                value: 2.0 * g.im,
                label: format!("tomo_im_{x}_{y}"),
            });
        }
    }
    rows
}

/// The num_states·4 rows fixing Bob's measured first and second moments.
pub fn measurement_constraints(cfg: &ProtocolConfig) -> Vec<Constraint> {
    let da = cfg.dim_a();
    let quads = fock::ladder_and_quadratures(cfg.n_cutoff);
    let mut rows = Vec::with_capacity(4 * da);
    for x in 0..da {
        let (q, p, n, d) = channel_expectations(x, cfg);
        let proj = basis_projector_a(x, da);
        for (op, value, name) in [
            (&quads.q, q, "q"),
            (&quads.p, p, "p"),
            (&quads.n, n, "n"),
            (&quads.d, d, "d"),
        ] {
            rows.push(Constraint {
                op: fock::kron(&proj, op),
                value: cfg.probs[x] * value,
                label: format!("meas_{name}_{x}"),
            });
        }
    }
    rows
}

/// The full ordered constraint set (measurement rows, then tomography rows).
pub fn build_constraint_set(cfg: &ProtocolConfig) -> ConstraintSet {
    let mut constraints = measurement_constraints(cfg);
    constraints.extend(tomography_constraints(cfg));
    ConstraintSet { constraints }
}

/// The postprocessing Kraus map G(ρ) = KρK† with K = Σ_z |z⟩⊗I_A⊗√R_z, and the
/// pinching channel on the key register. Matrices on the joint A⊗B space are
/// indexed A-major; the G image stacks the key register on top, z-major.
pub struct KrausOperators {
    /// √R_z on the B space.
    pub sqrt_regions: Vec<HermitianOperator>,
    /// I_A ⊗ √R_z on the joint space, one per z.
    pub lifted_sqrt: Vec<Mat<c64>>,
    /// Σ_z R_z on the B space (= K†K restricted to one A block).
    pub region_sum: HermitianOperator,
    /// I_A ⊗ Σ_z R_z on the joint space.
    pub lifted_sum: HermitianOperator,
    pub dim_ab: usize,
    pub dim_g: usize,
    pub num_states: usize,
}

pub fn kraus_operators(cfg: &ProtocolConfig, regions: &RegionOperatorSet) -> Result<KrausOperators, ProtocolError> {
    let ia = HermitianOperator::identity(cfg.dim_a());
    let mut sqrt_regions = Vec::with_capacity(cfg.num_states);
    let mut lifted_sqrt = Vec::with_capacity(cfg.num_states);
    for (z, r) in regions.ops.iter().enumerate() {
        let min_eig = r.min_eigenvalue()?;
        if min_eig < -1e-8 {
            return Err(ProtocolError::RegionNotPsd { z, min_eig });
        }
        let s = r.matrix_sqrt_clipped()?;
        lifted_sqrt.push(fock::kron(&ia, &s).mat().to_owned());
        sqrt_regions.push(s);
    }
    let region_sum = regions.sum();
    let lifted_sum = fock::kron(&ia, &region_sum);
    // the key register is as large as the region set, which normally matches
    // the signal constellation
    let num_blocks = regions.ops.len();
    Ok(KrausOperators {
        sqrt_regions,
        lifted_sqrt,
        region_sum,
        lifted_sum,
        dim_ab: cfg.dim_ab(),
        dim_g: num_blocks * cfg.dim_ab(),
        num_states: num_blocks,
    })
}

impl KrausOperators {
    /// G(ρ) assembled in full on the image space; reference path for tests and
    /// small problems (the objective uses a compact route instead).
    pub fn apply_g(&self, rho: &HermitianOperator) -> Mat<c64> {
        let n = self.dim_ab;
        let mut out = Mat::<c64>::zeros(self.dim_g, self.dim_g);
        for z in 0..self.num_states {
            for zp in 0..self.num_states {
                let block = &self.lifted_sqrt[z] * rho.mat() * &self.lifted_sqrt[zp];
                for i in 0..n {
                    for j in 0..n {
                        out[(z * n + i, zp * n + j)] = block[(i, j)];
                    }
                }
            }
        }
        out
    }

    /// The pinching channel: zeroes every off-diagonal key-register block.
    pub fn apply_pinching(&self, sigma: &Mat<c64>) -> Mat<c64> {
        let n = self.dim_ab;
        let mut out = Mat::<c64>::zeros(self.dim_g, self.dim_g);
        for z in 0..self.num_states {
            for i in 0..n {
                for j in 0..n {
                    out[(z * n + i, z * n + j)] = sigma[(z * n + i, z * n + j)];
                }
            }
        }
        out
    }

    /// K† Y K for Y on the image space.
    pub fn apply_g_adjoint(&self, y: &Mat<c64>) -> HermitianOperator {
        let n = self.dim_ab;
        let mut acc = Mat::<c64>::zeros(n, n);
        for z in 0..self.num_states {
            for zp in 0..self.num_states {
                let block = Mat::from_fn(n, n, |i, j| y[(z * n + i, zp * n + j)]);
                let term = &self.lifted_sqrt[z] * &block * &self.lifted_sqrt[zp];
                for i in 0..n {
                    for j in 0..n {
                        acc[(i, j)] += term[(i, j)];
                    }
                }
            }
        }
        HermitianOperator::from_mat(acc)
    }

    /// The z-th diagonal block of G(ρ): (I⊗√R_z) ρ (I⊗√R_z).
    pub fn g_diagonal_block(&self, z: usize, rho: &HermitianOperator) -> HermitianOperator {
        let m = &self.lifted_sqrt[z] * rho.mat() * &self.lifted_sqrt[z];
        HermitianOperator::from_mat(m)
    }

    /// Tr[G(ρ)] = Tr[ρ·(I⊗ΣR_z)], the passing probability of ρ.
    pub fn pass_probability(&self, rho: &HermitianOperator) -> f64 {
        self.lifted_sum.inner(rho)
    }
}

/// A strictly feasible starting point and the feasibility-projection diagnostics.
pub struct InitialState {
    pub rho: HermitianOperator,
    /// Optimal t of the feasibility projection: the smallest achievable worst
    /// constraint violation.
    pub feasibility_bound: f64,
    /// Measured worst violation of the returned state.
    pub max_violation: f64,
}

/// Truncated displacement operator exp(βa† − β*a), via the eigendecomposition
/// of the Hermitian generator.
fn displacement_operator(beta: c64, n_cutoff: usize) -> Result<Mat<c64>, ProtocolError> {
    let dim = n_cutoff + 1;
    // H = -i(βa† − β*a) is Hermitian; D = e^{iH}
    let h = HermitianOperator::from_fn(dim, |i, j| {
        if i == j + 1 {
            // βa† entry at (n+1, n): β√(n+1); times −i
            c64::new(0.0, -1.0) * beta * c64::new(((j + 1) as f64).sqrt(), 0.0)
        } else if j == i + 1 {
            c64::new(0.0, 1.0) * beta.conj() * c64::new(((i + 1) as f64).sqrt(), 0.0)
        } else {
            c64::new(0.0, 0.0)
        }
    });
    let eig = h.hermitian_eig()?;
    let n = dim;
    let mut scaled = Mat::<c64>::zeros(n, n);
    for k in 0..n {
        let ph = c64::new(0.0, eig.eigenvalues[k]).exp();
        for i in 0..n {
            scaled[(i, k)] = eig.vectors[(i, k)] * ph;
        }
    }
    Ok(&scaled * eig.vectors.adjoint())
}

/// Gaussian-channel warm start: displaced thermal diagonal blocks (displacement
/// √η·α_x, mean thermal photons ηξ/2) and damped coherent cross blocks, each
/// scaled so its trace matches the tomography target.
pub fn gaussian_warm_start(cfg: &ProtocolConfig) -> Result<HermitianOperator, ProtocolError> {
    let eta = cfg.eta();
    let nbar = eta * cfg.excess_noise / 2.0;
    let db = cfg.dim_b();
    let n_joint = cfg.dim_ab();
    let gram = gram_matrix(cfg);
    // truncated thermal state
    let thermal: Vec<f64> = (0..db)
        .map(|n| {
            if nbar <= 0.0 {
                if n == 0 { 1.0 } else { 0.0 }
            } else {
                nbar.powi(n as i32) / (1.0 + nbar).powi(n as i32 + 1)
            }
        })
        .collect();
    let mut out = Mat::<c64>::zeros(n_joint, n_joint);
    let betas: Vec<c64> = (0..cfg.num_states)
        .map(|x| cfg.signal_amplitude(x) * eta.sqrt())
        .collect();
    let kets: Vec<fock::FockVector> = betas
        .iter()
        .map(|&b| fock::coherent_state_fock(b, cfg.n_cutoff))
        .collect();
    for x in 0..cfg.num_states {
        let d_op = displacement_operator(betas[x], cfg.n_cutoff)?;
        let mut tau = Mat::<c64>::zeros(db, db);
        for n in 0..db {
            for i in 0..db {
                for j in 0..db {
                    tau[(i, j)] += d_op[(i, n)] * thermal[n] * d_op[(j, n)].conj();
                }
            }
        }
        for i in 0..db {
            for j in 0..db {
                out[(x * db + i, x * db + j)] = tau[(i, j)] * cfg.probs[x];
            }
        }
        for y in 0..cfg.num_states {
            if y == x {
                continue;
            }
            // exact damped overlap ⟨β_y|β_x⟩ sets the block normalization
            let expo = betas[y].conj() * betas[x]
                - 0.5 * (betas[x].norm_sqr() + betas[y].norm_sqr());
            let overlap = c64::new(expo.re.exp() * expo.im.cos(), expo.re.exp() * expo.im.sin());
            let scale = gram.entry(x, y) / overlap;
            for i in 0..db {
                for j in 0..db {
                    out[(x * db + i, y * db + j)] =
                        scale * kets[x].amplitude(i) * kets[y].amplitude(j).conj();
                }
            }
        }
    }
    Ok(HermitianOperator::from_mat(out))
}

/// Builds the Frank-Wolfe starting point: the Gaussian-channel warm start,
/// projected into the feasible set. The projection carries correctness: first
/// the smallest achievable violation t* is found, then the overlap with the
/// warm start is maximized over states violating no constraint by more than
/// max(10·t*, 1e-9).
pub fn initial_state(
    cfg: &ProtocolConfig,
    constraints: &ConstraintSet,
    opts: &crate::sdp::SolverOptions,
) -> Result<InitialState, ProtocolError> {
    let warm = gaussian_warm_start(cfg)?;
    let tight = crate::sdp::SolverOptions {
        tol_feas: 1e-10,
        tol_gap: 1e-9,
        ..opts.clone()
    };
    let feas = crate::sdp::solve_feasibility(constraints, cfg.dim_ab(), &tight)
        .map_err(|e| ProtocolError::InitialStateFailed(e.to_string()))?;
    if feas.violation_bound > 1e-6 {
        return Err(ProtocolError::InfeasibleConfiguration { t: feas.violation_bound });
    }
    let slack = (feas.violation_bound * 1.5).max(2e-10);
    let problem = crate::sdp::LinearSdp {
        cost: warm.scaled(-1.0),
        equalities: Vec::new(),
        inequalities: constraints
            .constraints
            .iter()
            .flat_map(|c| {
                [
                    (c.op.clone(), c.value + slack),
                    (c.op.scaled(-1.0), -c.value + slack),
                ]
            })
            .collect(),
    };
    let sol = crate::sdp::solve(&problem, &tight)
        .map_err(|e| ProtocolError::InitialStateFailed(e.to_string()))?;
    let candidate = sol.x;
    // keep the overlap-optimal candidate unless its violation betrays a bad solve
    let cand_viol = constraints.max_violation(&candidate);
    let feas_viol = constraints.max_violation(&feas.rho);
    let (rho, max_violation) = if cand_viol <= (2.0 * slack).max(feas_viol) {
        (candidate, cand_viol)
    } else {
        (feas.rho, feas_viol)
    };
    Ok(InitialState {
        rho,
        feasibility_bound: feas.violation_bound,
        max_violation,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::fock::test_support::*;

    fn cfg_8psk(alpha: f64, n_cutoff: usize) -> ProtocolConfig {
        let mut cfg = ProtocolConfig::new(8, alpha);
        cfg.n_cutoff = n_cutoff;
        cfg
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let mut cfg = cfg_8psk(0.9, 10);
        assert!(cfg.validate().is_ok());
        cfg.excess_noise = -0.01;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("xi"), "{err}");
        let mut cfg = cfg_8psk(0.9, 10);
        cfg.probs[0] += 1e-6;
        assert!(cfg.validate().is_err());
        let mut cfg = cfg_8psk(0.9, 10);
        cfg.num_states = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn eta_follows_fiber_model() {
        let mut cfg = cfg_8psk(0.9, 10);
        cfg.distance_km = 50.0;
        assert!((cfg.eta() - 10f64.powf(-1.0)).abs() < 1e-15);
        cfg.eta_override = Some(0.7);
        assert!((cfg.eta() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn region_element_diagonal_without_postselection() {
        let cfg = cfg_8psk(0.9, 10);
        for z in 0..8 {
            for n in 0..=10 {
                let v = region_operator_element(z, n, n, &cfg);
                assert!((v.re - 0.125).abs() < 1e-14, "z={z} n={n}: {v:?}");
                assert!(v.im.abs() < 1e-14);
            }
        }
    }

    #[test]
    fn region_element_first_off_diagonal() {
        // (1/π)·Γ(3/2,0)·sin(π/8) = 0.10795300316834…, cross-checked against
        // the wedge quadrature oracle (see oracle tests).
        let cfg = cfg_8psk(0.9, 10);
        let v = region_operator_element(0, 0, 1, &cfg);
        assert!((v.re - 0.107953003168343).abs() < 1e-12, "{v:?}");
        assert!(v.im.abs() < 1e-15);
    }

    #[test]
    fn region_element_vanishes_for_large_radius() {
        let mut cfg = cfg_8psk(0.9, 10);
        cfg.delta_r = 6.0;
        let v = region_operator_element(0, 0, 0, &cfg);
        let want = (-36.0f64).exp() / 8.0;
        assert!((v.re - want).abs() < 1e-20, "{} vs {want}", v.re);
    }

    #[test]
    fn region_operators_complete_without_postselection() {
        for n_cutoff in [6, 14] {
            let cfg = cfg_8psk(0.9, n_cutoff);
            let sum = build_region_operators(&cfg).sum();
            let id = HermitianOperator::identity(cfg.dim_b());
            assert!(sum.sub(&id).frobenius_norm() < 1e-10 * (cfg.dim_b() as f64).sqrt());
        }
    }

    #[test]
    fn region_vacuum_survival_probability() {
        let mut cfg = cfg_8psk(0.9, 6);
        cfg.delta_r = 0.65;
        let sum = build_region_operators(&cfg).sum();
        let want = (-0.65f64 * 0.65).exp();
        assert!((sum.entry(0, 0).re - want).abs() < 1e-12);
    }

    #[test]
    fn region_operators_rotation_covariant() {
        let mut cfg = cfg_8psk(0.9, 8);
        cfg.delta_r = 0.3;
        let set = build_region_operators(&cfg);
        let db = cfg.dim_b();
        for z in 1..8 {
            // U_z = diag(e^{i n z π/4})
            let rotated = HermitianOperator::from_fn(db, |n, m| {
                let ang = (n as f64 - m as f64) * z as f64 * cfg.phase_step();
                set.ops[0].entry(n, m) * c64::new(ang.cos(), ang.sin())
            });
            let diff = rotated.sub(&set.ops[z]).frobenius_norm();
            assert!(diff < 1e-10, "z={z}: {diff:.3e}");
        }
    }

    #[test]
    fn region_operators_psd_and_bounded() {
        for delta_r in [0.0, 0.4, 1.1] {
            let mut cfg = cfg_8psk(0.9, 9);
            cfg.delta_r = delta_r;
            for (z, r) in build_region_operators(&cfg).ops.iter().enumerate() {
                let eigs = r.eigenvalues().unwrap();
                assert!(eigs[eigs.len() - 1] > -1e-10, "z={z} Δr={delta_r}");
                assert!(eigs[0] < 1.0 + 1e-10, "z={z} Δr={delta_r}");
            }
        }
    }

    #[test]
    fn gram_matrix_values() {
        let cfg = cfg_8psk(0.9, 10);
        let g = gram_matrix(&cfg);
        for x in 0..8 {
            assert!((g.entry(x, x).re - 0.125).abs() < 1e-15);
        }
        // antipodal pair: (1/8)·e^{-2|α|²}
        let want = 0.125 * (-2.0 * 0.81f64).exp();
        assert!((g.entry(0, 4).re - want).abs() < 1e-15);
        assert!(g.entry(0, 4).im.abs() < 1e-15);
        // PSD
        assert!(g.min_eigenvalue().unwrap() > -1e-12);

        // α → 0 collapses all entries to √(p_x p_y)
        let tiny = ProtocolConfig::new(8, 1e-12);
        let g0 = gram_matrix(&tiny);
        for x in 0..8 {
            for y in 0..8 {
                assert!((g0.entry(x, y).re - 0.125).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn channel_expectation_values() {
        let mut cfg = cfg_8psk(0.9, 10);
        cfg.eta_override = Some(1.0);
        let (q, p, n, d) = channel_expectations(0, &cfg);
        assert!((q - 1.2727922061357857).abs() < 1e-12);
        assert!(p.abs() < 1e-12);
        assert!((n - 0.81).abs() < 1e-12);
        assert!((d - 1.62).abs() < 1e-12);

        // quarter turn: α_2 = i|α|
        let (q2, _p2, _n2, d2) = channel_expectations(2, &cfg);
        assert!(q2.abs() < 1e-12);
        assert!((d2 + 2.0 * 0.81).abs() < 1e-12);

        // total loss
        cfg.eta_override = Some(1e-14);
        let (q, p, n, d) = channel_expectations(0, &cfg);
        assert!(q.abs() < 1e-6 && p.abs() < 1e-6 && n.abs() < 1e-6 && d.abs() < 1e-6);
    }

    #[test]
    fn constraint_set_counts_and_order() {
        let cfg = cfg_8psk(0.9, 6);
        let set = build_constraint_set(&cfg);
        assert_eq!(set.len(), 96);
        assert_eq!(set.constraints[0].label, "meas_q_0");
        assert_eq!(set.constraints[3].label, "meas_d_0");
        assert_eq!(set.constraints[32].label, "tomo_diag_0");
        assert_eq!(set.constraints[40].label, "tomo_re_0_1");
        assert_eq!(set.constraints[41].label, "tomo_im_0_1");

        let qpsk = ProtocolConfig::new(4, 0.9);
        assert_eq!(build_constraint_set(&qpsk).len(), 32);
    }

    #[test]
    fn tomography_diagonals_sum_to_full_trace() {
        let cfg = cfg_8psk(0.9, 5);
        let rows = tomography_constraints(&cfg);
        let mut acc = HermitianOperator::zeros(cfg.dim_ab());
        let mut rhs = 0.0;
        for r in rows.iter().take(8) {
            acc = acc.add(&r.op);
            rhs += r.value;
        }
        let id = HermitianOperator::identity(cfg.dim_ab());
        assert!(acc.sub(&id).frobenius_norm() < 1e-14);
        assert!((rhs - 1.0).abs() < 1e-14);
    }

    /// The exact source-replacement state at η = 1, ξ = 0, assembled from
    /// truncated coherent states.
    pub(crate) fn exact_lossless_state(cfg: &ProtocolConfig) -> HermitianOperator {
        let db = cfg.dim_b();
        let mut psi = vec![c64::new(0.0, 0.0); cfg.dim_ab()];
        for x in 0..cfg.num_states {
            let ket = fock::coherent_state_fock(cfg.signal_amplitude(x), cfg.n_cutoff);
            for b in 0..db {
                psi[x * db + b] = c64::new(cfg.probs[x].sqrt(), 0.0) * ket.amplitude(b);
            }
        }
        HermitianOperator::from_fn(cfg.dim_ab(), |i, j| psi[i] * psi[j].conj())
    }

    #[test]
    fn exact_state_satisfies_all_constraints() {
        let mut cfg = cfg_8psk(0.9, 14);
        cfg.eta_override = Some(1.0);
        let rho = exact_lossless_state(&cfg);
        let set = build_constraint_set(&cfg);
        let worst = set.max_violation(&rho);
        assert!(worst < 1e-9, "max residual {worst:.3e}");
    }

    #[test]
    fn kraus_trace_preserving_without_postselection() {
        let cfg = cfg_8psk(0.9, 6);
        let regions = build_region_operators(&cfg);
        let kraus = kraus_operators(&cfg, &regions).unwrap();
        let mut r = rng(7);
        let rho = random_density(cfg.dim_ab(), &mut r);
        let g = kraus.apply_g(&rho);
        let mut tr = c64::new(0.0, 0.0);
        for i in 0..cfg.dim_g() {
            tr += g[(i, i)];
        }
        assert!((tr.re - rho.trace()).abs() < 1e-10);
        assert!((kraus.pass_probability(&rho) - rho.trace()).abs() < 1e-10);
    }

    #[test]
    fn pinching_is_idempotent() {
        let cfg = cfg_8psk(0.9, 4);
        let regions = build_region_operators(&cfg);
        let kraus = kraus_operators(&cfg, &regions).unwrap();
        let mut r = rng(13);
        let rho = random_density(cfg.dim_ab(), &mut r);
        let g = kraus.apply_g(&rho);
        let once = kraus.apply_pinching(&g);
        let twice = kraus.apply_pinching(&once);
        let mut diff = 0.0f64;
        for i in 0..cfg.dim_g() {
            for j in 0..cfg.dim_g() {
                diff += (once[(i, j)] - twice[(i, j)]).norm_sqr();
            }
        }
        assert!(diff.sqrt() < 1e-14);
    }

    #[test]
    fn initial_state_recovers_exact_lossless_state() {
        let mut cfg = cfg_8psk(0.9, 8);
        cfg.eta_override = Some(1.0);
        let set = build_constraint_set(&cfg);
        let init = initial_state(&cfg, &set, &crate::sdp::SolverOptions::default()).unwrap();
        assert!(init.max_violation < 1e-9, "residual {:.3e}", init.max_violation);
        let pure = exact_lossless_state(&cfg);
        let overlap = pure.inner(&init.rho);
        assert!(overlap > 0.99, "overlap with the pure state: {overlap}");
        assert!(init.rho.min_eigenvalue().unwrap() > -1e-9);
    }

    #[test]
    fn initial_state_noisy_channel_feasible() {
        let mut cfg = cfg_8psk(0.9, 10);
        cfg.eta_override = Some(0.1);
        cfg.excess_noise = 0.01;
        let set = build_constraint_set(&cfg);
        let init = initial_state(&cfg, &set, &crate::sdp::SolverOptions::default()).unwrap();
        assert!(init.feasibility_bound < 1e-8, "t = {:.3e}", init.feasibility_bound);
        assert!(init.max_violation < 1e-7);
        assert!(init.rho.min_eigenvalue().unwrap() > -1e-9);
        assert!((init.rho.trace() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn warm_start_moments_match_channel() {
        let mut cfg = cfg_8psk(0.9, 12);
        cfg.eta_override = Some(0.5);
        cfg.excess_noise = 0.02;
        let warm = gaussian_warm_start(&cfg).unwrap();
        // diagonal x-block of the warm start reproduces the channel moments
        let quads = fock::ladder_and_quadratures(cfg.n_cutoff);
        let db = cfg.dim_b();
        for x in [0usize, 3] {
            let block = HermitianOperator::from_fn(db, |i, j| {
                warm.entry(x * db + i, x * db + j) * (1.0 / cfg.probs[x])
            });
            let (q, _p, n, _d) = channel_expectations(x, &cfg);
            assert!((quads.q.inner(&block) - q).abs() < 1e-6);
            assert!((quads.n.inner(&block) - n).abs() < 1e-6);
        }
    }

    #[test]
    fn pass_probability_tracks_postselection() {
        let mut cfg = cfg_8psk(0.9, 8);
        cfg.eta_override = Some(1.0);
        let rho = exact_lossless_state(&cfg);
        let mut prev = 1.0 + 1e-12;
        for delta_r in [0.0, 0.3, 0.6, 1.0, 2.0] {
            cfg.delta_r = delta_r;
            let regions = build_region_operators(&cfg);
            let kraus = kraus_operators(&cfg, &regions).unwrap();
            let p = kraus.pass_probability(&rho);
            assert!(p <= prev + 1e-12, "p_pass not decreasing at Δr={delta_r}");
            assert!((0.0..=1.0 + 1e-10).contains(&p));
            prev = p;
        }
        assert!(prev < 0.2, "large Δr should postselect almost everything");
    }
}
