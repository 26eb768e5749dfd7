//! The perturbed relative-entropy objective f(ρ) = D(G_ε(ρ) ‖ Z(G_ε(ρ))), its
//! adjoint-channel gradient, and the classical post-processing quantities
//! (conditional probabilities, passing probability, error-correction leakage).
//!
//! Values and gradients are computed without ever assembling the image-space
//! matrix: G(ρ) = KρK† has rank at most dim(ρ), so its spectrum comes from the
//! small Gram matrix √ρ·K†K·√ρ and the adjoint of its logarithm from the same
//! factors. The literal image-space construction survives as a reference path
//! for tests.

use faer::{c64, Mat};
use thiserror::Error;

use crate::fock::{HermitianOperator, LOG_FLOOR};
use crate::protocol::{
    build_region_operators, kraus_operators, KrausOperators, ProtocolConfig, ProtocolError,
    RegionOperatorSet,
};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("postselection removed every outcome (p_pass = 0); the rate is undefined")]
    UndefinedRate,
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Fock(#[from] crate::fock::FockError),
}

/// Everything needed to evaluate the objective: the maps G and Z (through the
/// lifted √R_z factors), the region operators, and the perturbation in use.
pub struct ObjectiveContext {
    pub cfg: ProtocolConfig,
    pub regions: RegionOperatorSet,
    pub kraus: KrausOperators,
    /// Mixing weight of the perturbation D_ε; ε̃ from the config by default.
    pub eps: f64,
}

impl ObjectiveContext {
    pub fn new(cfg: ProtocolConfig) -> Result<Self, ObjectiveError> {
        cfg.validate()?;
        let regions = build_region_operators(&cfg);
        let kraus = kraus_operators(&cfg, &regions)?;
        let eps = cfg.perturbation;
        Ok(Self { cfg, regions, kraus, eps })
    }

    #[cfg(test)]
    pub(crate) fn from_parts(
        cfg: ProtocolConfig,
        regions: RegionOperatorSet,
        kraus: KrausOperators,
        eps: f64,
    ) -> Self {
        Self { cfg, regions, kraus, eps }
    }

    /// The same context evaluated with a different perturbation weight (used
    /// by the lower-bound certificate, whose theorem fixes its own ε).
    pub fn with_perturbation(&self, eps: f64) -> Result<Self, ObjectiveError> {
        assert!(eps > 0.0 && eps < 1.0, "perturbation must lie in (0, 1)");
        let regions = build_region_operators(&self.cfg);
        let kraus = kraus_operators(&self.cfg, &regions)?;
        Ok(Self { cfg: self.cfg.clone(), regions, kraus, eps })
    }

    pub fn dim(&self) -> usize {
        self.kraus.dim_ab
    }

    fn entropy_weight(&self, lambda: f64) -> f64 {
        let d = self.kraus.dim_g as f64;
        (1.0 - self.eps) * lambda.max(0.0) + self.eps / d
    }

    /// f(ρ) in bits.
    pub fn value(&self, rho: &HermitianOperator) -> Result<f64, ObjectiveError> {
        let (v, _) = self.evaluate(rho, false)?;
        Ok(v)
    }

    /// ∇f(ρ) as a Hermitian operator under the pairing Re Tr[∇f·Δ].
    pub fn gradient(&self, rho: &HermitianOperator) -> Result<HermitianOperator, ObjectiveError> {
        let (_, g) = self.evaluate(rho, true)?;
        Ok(g.expect("gradient requested"))
    }

    pub fn value_and_gradient(
        &self,
        rho: &HermitianOperator,
    ) -> Result<(f64, HermitianOperator), ObjectiveError> {
        let (v, g) = self.evaluate(rho, true)?;
        Ok((v, g.expect("gradient requested")))
    }

    /// d/dt f(ρ + tΔ) at t = 0.
    pub fn directional_derivative(
        &self,
        rho: &HermitianOperator,
        dir: &HermitianOperator,
    ) -> Result<f64, ObjectiveError> {
        Ok(self.gradient(rho)?.inner(dir))
    }

    fn evaluate(
        &self,
        rho: &HermitianOperator,
        want_gradient: bool,
    ) -> Result<(f64, Option<HermitianOperator>), ObjectiveError> {
        let n = self.dim();
        assert_eq!(rho.dim(), n, "state dimension mismatch");
        let d = self.kraus.dim_g as f64;
        let eps = self.eps;
        let floor_val = eps / d;

        // √ρ from the clipped spectrum
        let rho_eig = rho.hermitian_eig()?;
        let wd = {
            let mut m = Mat::<c64>::zeros(n, n);
            for k in 0..n {
                let s = rho_eig.eigenvalues[k].max(0.0).sqrt();
                for i in 0..n {
                    m[(i, k)] = rho_eig.vectors[(i, k)] * s;
                }
            }
            m
        };
        // Y = (I⊗ΣR_z)·√ρ ;  T = √ρ†·Y carries the nonzero spectrum of G(ρ)
        let y = self.kraus.lifted_sum.mat() * &wd;
        let t = HermitianOperator::from_mat(wd.adjoint() * &y);
        let t_eig = t.hermitian_eig()?;

        // first term: Tr[G_ε(ρ) log₂ G_ε(ρ)] over the full image space
        let mut value = (d - n as f64) * floor_val * floor_val.log2();
        for &tau in &t_eig.eigenvalues {
            let mu = self.entropy_weight(tau);
            value += mu * mu.log2();
        }

        // second term: Σ_z Tr[A_zz log₂ A_zz] over the pinched diagonal blocks
        let mut grad2: Option<Mat<c64>> = want_gradient.then(|| Mat::zeros(n, n));
        for z in 0..self.kraus.num_states {
            let block = HermitianOperator::from_mat(
                &self.kraus.lifted_sqrt[z] * rho.mat() * &self.kraus.lifted_sqrt[z],
            );
            if let Some(acc) = &mut grad2 {
                let beig = block.hermitian_eig()?;
                for &nu in &beig.eigenvalues {
                    let w = self.entropy_weight(nu);
                    value -= w * w.log2();
                }
                let log_block = beig.assemble(|nu| self.entropy_weight(nu).log2());
                let term = &self.kraus.lifted_sqrt[z] * log_block.mat() * &self.kraus.lifted_sqrt[z];
                for i in 0..n {
                    for j in 0..n {
                        acc[(i, j)] += term[(i, j)];
                    }
                }
            } else {
                for nu in block.eigenvalues()? {
                    let w = self.entropy_weight(nu);
                    value -= w * w.log2();
                }
            }
        }

        if !want_gradient {
            return Ok((value, None));
        }

        // adjoint of log₂ G_ε(ρ): columns P_k = Y·v_k/√τ_k span K†·range(G(ρ)),
        // the orthogonal complement carries the constant log₂(ε/d)
        let mut p = Mat::<c64>::zeros(n, n);
        let mut logmu = vec![0.0; n];
        for k in 0..n {
            let tau = t_eig.eigenvalues[k];
            logmu[k] = self.entropy_weight(tau).log2();
            if tau > 1e-300 {
                let inv = 1.0 / tau.sqrt();
                for i in 0..n {
                    let mut acc = c64::new(0.0, 0.0);
                    for l in 0..n {
                        acc += y[(i, l)] * t_eig.vectors[(l, k)];
                    }
                    p[(i, k)] = acc * inv;
                }
            }
        }
        let p_log = Mat::from_fn(n, n, |i, k| p[(i, k)] * logmu[k]);
        let p_log_p = &p_log * p.adjoint();
        let p_p = &p * p.adjoint();
        let log_floor = floor_val.log2();
        let grad2 = grad2.expect("accumulated above");
        let scale = 1.0 - eps;
        let grad = HermitianOperator::from_mat(Mat::from_fn(n, n, |i, j| {
            let complement = self.kraus.lifted_sum.entry(i, j) - p_p[(i, j)];
            (p_log_p[(i, j)] + complement * log_floor - grad2[(i, j)]) * scale
        }));
        Ok((value, Some(grad)))
    }

    /// Reference evaluation through the literal image-space construction; used
    /// to validate the compact route on small instances.
    #[cfg(test)]
    pub(crate) fn value_and_gradient_reference(
        &self,
        rho: &HermitianOperator,
    ) -> Result<(f64, HermitianOperator), ObjectiveError> {
        let d = self.kraus.dim_g;
        let eps = self.eps;
        let g_full = self.kraus.apply_g(rho);
        let a = HermitianOperator::from_mat(Mat::from_fn(d, d, |i, j| {
            let base = g_full[(i, j)] * (1.0 - eps);
            if i == j {
                base + eps / d as f64
            } else {
                base
            }
        }));
        let b = HermitianOperator::from_mat(self.kraus.apply_pinching(&a.mat().to_owned()));
        let floor = (eps / d as f64) * 1e-3;
        let log_a = a.matrix_log_clipped(floor.max(LOG_FLOOR * 1e-4))?;
        let log_b = b.matrix_log_clipped(floor.max(LOG_FLOOR * 1e-4))?;
        let diff = log_a.sub(&log_b);
        let value = a.inner(&diff);
        let grad = self
            .kraus
            .apply_g_adjoint(&diff.mat().to_owned())
            .scaled(1.0 - eps);
        Ok((value, grad))
    }

    /// P(z|x) = Tr[ρ_B^x · R_z], clipped into [0, 1].
    pub fn conditional_probabilities(&self, rho: &HermitianOperator) -> Vec<Vec<f64>> {
        let db = self.cfg.dim_b();
        let mut out = Vec::with_capacity(self.cfg.num_states);
        for x in 0..self.cfg.num_states {
            let px = self.cfg.probs[x];
            let block = HermitianOperator::from_fn(db, |i, j| {
                rho.entry(x * db + i, x * db + j) * (1.0 / px)
            });
            let row: Vec<f64> = self
                .regions
                .ops
                .iter()
                .map(|r| r.inner(&block).clamp(0.0, 1.0))
                .collect();
            out.push(row);
        }
        out
    }

    /// Passing probability via the map: Tr[G(ρ)].
    pub fn p_pass(&self, rho: &HermitianOperator) -> f64 {
        self.kraus.pass_probability(rho)
    }

    /// Error-correction leakage per passed signal at the state ρ.
    pub fn delta_ec(&self, rho: &HermitianOperator) -> Result<f64, ObjectiveError> {
        let probs = self.conditional_probabilities(rho);
        delta_ec_from_probs(&probs, &self.cfg.probs, self.cfg.recon_efficiency)
    }
}

/// p_pass computed from the conditional probabilities.
pub fn p_pass_from_probs(prob: &[Vec<f64>], priors: &[f64]) -> f64 {
    prob.iter()
        .zip(priors)
        .map(|(row, p)| p * row.iter().sum::<f64>())
        .sum()
}

fn entropy_bits(dist: &[f64]) -> f64 {
    -dist
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.log2())
        .sum::<f64>()
}

/// δ_EC = (1−β)·H(Z) + β·H(Z|X) on the postselected alphabet: the discarded
/// symbol carries no key, so the joint distribution is renormalized by p_pass
/// before the entropies are taken.
pub fn delta_ec_from_probs(
    prob: &[Vec<f64>],
    priors: &[f64],
    beta: f64,
) -> Result<f64, ObjectiveError> {
    let p_pass = p_pass_from_probs(prob, priors);
    if p_pass <= 0.0 {
        return Err(ObjectiveError::UndefinedRate);
    }
    let ns = prob.len();
    let mut z_marginal = vec![0.0; ns];
    let mut h_z_given_x = 0.0;
    for (row, &px) in prob.iter().zip(priors) {
        let row_sum: f64 = row.iter().sum();
        for (z, &p) in row.iter().enumerate() {
            z_marginal[z] += px * p / p_pass;
        }
        if row_sum > 0.0 {
            let cond: Vec<f64> = row.iter().map(|&p| p / row_sum).collect();
            h_z_given_x += (px * row_sum / p_pass) * entropy_bits(&cond);
        }
    }
    let h_z = entropy_bits(&z_marginal);
    Ok((1.0 - beta) * h_z + beta * h_z_given_x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::test_support::*;
    use crate::fock::{self};
    use crate::oracle;
    use crate::protocol::RegionOperatorSet;

    fn qpsk_ctx(n_cutoff: usize) -> ObjectiveContext {
        let mut cfg = ProtocolConfig::new(4, 0.8);
        cfg.n_cutoff = n_cutoff;
        cfg.eta_override = Some(0.8);
        cfg.excess_noise = 0.01;
        ObjectiveContext::new(cfg).unwrap()
    }

    fn lossless_8psk_ctx(n_cutoff: usize) -> (ObjectiveContext, HermitianOperator) {
        let mut cfg = ProtocolConfig::new(8, 0.9);
        cfg.n_cutoff = n_cutoff;
        cfg.eta_override = Some(1.0);
        let rho = crate::protocol::tests::exact_lossless_state(&cfg);
        (ObjectiveContext::new(cfg).unwrap(), rho)
    }

    #[test]
    fn compact_route_matches_reference() {
        let ctx = qpsk_ctx(4);
        let mut r = rng(51);
        for _ in 0..3 {
            let rho = random_density(ctx.dim(), &mut r);
            let (v_fast, g_fast) = ctx.value_and_gradient(&rho).unwrap();
            let (v_ref, g_ref) = ctx.value_and_gradient_reference(&rho).unwrap();
            assert!(
                (v_fast - v_ref).abs() < 1e-9 * (1.0 + v_ref.abs()),
                "value {v_fast} vs reference {v_ref}"
            );
            let gdiff = g_fast.sub(&g_ref).frobenius_norm() / (1.0 + g_ref.frobenius_norm());
            assert!(gdiff < 1e-8, "gradient mismatch {gdiff:.3e}");
        }
    }

    #[test]
    fn pinched_image_gives_zero_objective() {
        // a single all-pass region makes Z(G(ρ)) = G(ρ), so f must vanish
        let mut cfg = ProtocolConfig::new(4, 0.8);
        cfg.n_cutoff = 4;
        let db = cfg.dim_b();
        let regions = RegionOperatorSet { ops: vec![HermitianOperator::identity(db)] };
        let kraus = crate::protocol::kraus_operators(&cfg, &regions).unwrap();
        let ctx = ObjectiveContext::from_parts(cfg, regions, kraus, 1e-11);
        let mut r = rng(53);
        let rho = random_density(ctx.dim(), &mut r);
        let v = ctx.value(&rho).unwrap();
        assert!(v.abs() < 1e-9, "f = {v}");
    }

    #[test]
    fn objective_nonnegative() {
        let ctx = qpsk_ctx(5);
        let mut r = rng(59);
        for _ in 0..5 {
            let rho = random_density(ctx.dim(), &mut r);
            let v = ctx.value(&rho).unwrap();
            assert!(v > -1e-10, "f = {v}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let ctx = qpsk_ctx(4);
        let n = ctx.dim();
        let mut r = rng(61);
        let base = random_density(n, &mut r);
        let id = HermitianOperator::identity(n).scaled(1.0 / n as f64);
        let rho = base.scaled(0.9).add(&id.scaled(0.1 * n as f64 * (1.0 / n as f64)));
        let rho = rho.scaled(1.0 / rho.trace());
        let grad = ctx.gradient(&rho).unwrap();
        let t = 1e-5;
        for _ in 0..5 {
            let dir = random_hermitian(n, &mut r);
            let dir = dir.scaled(1.0 / dir.frobenius_norm());
            let plus = ctx.value(&rho.add(&dir.scaled(t))).unwrap();
            let minus = ctx.value(&rho.add(&dir.scaled(-t))).unwrap();
            let fd = (plus - minus) / (2.0 * t);
            let an = grad.inner(&dir);
            assert!(
                (fd - an).abs() < 1e-4 * (1.0 + an.abs()),
                "finite difference {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn gradient_is_hermitian() {
        let ctx = qpsk_ctx(4);
        let mut r = rng(67);
        let rho = random_density(ctx.dim(), &mut r);
        let g = ctx.gradient(&rho).unwrap();
        for i in 0..g.dim() {
            for j in 0..g.dim() {
                assert!((g.entry(i, j) - g.entry(j, i).conj()).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn objective_convex_along_segments() {
        let ctx = qpsk_ctx(4);
        let mut r = rng(71);
        for _ in 0..3 {
            let r1 = random_density(ctx.dim(), &mut r);
            let r2 = random_density(ctx.dim(), &mut r);
            let f1 = ctx.value(&r1).unwrap();
            let f2 = ctx.value(&r2).unwrap();
            for lam in [0.25, 0.5, 0.75] {
                let mix = r1.scaled(lam).add(&r2.scaled(1.0 - lam));
                let fm = ctx.value(&mix).unwrap();
                assert!(
                    fm <= lam * f1 + (1.0 - lam) * f2 + 1e-8,
                    "convexity violated at λ={lam}: {fm} vs {}",
                    lam * f1 + (1.0 - lam) * f2
                );
            }
        }
    }

    #[test]
    fn pass_probability_routes_agree() {
        let (ctx, rho) = lossless_8psk_ctx(10);
        let probs = ctx.conditional_probabilities(&rho);
        let via_probs = p_pass_from_probs(&probs, &ctx.cfg.probs);
        let via_map = ctx.p_pass(&rho);
        assert!((via_probs - via_map).abs() < 1e-8);

        // with postselection too
        let mut cfg = ctx.cfg.clone();
        cfg.delta_r = 0.6;
        let ctx2 = ObjectiveContext::new(cfg).unwrap();
        let probs2 = ctx2.conditional_probabilities(&rho);
        let a = p_pass_from_probs(&probs2, &ctx2.cfg.probs);
        let b = ctx2.p_pass(&rho);
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        assert!(a < via_probs);
    }

    #[test]
    fn conditional_probabilities_on_exact_state() {
        let (ctx, rho) = lossless_8psk_ctx(14);
        let probs = ctx.conditional_probabilities(&rho);
        // no postselection: every row sums to 1
        for row in &probs {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-8, "row sum {s}");
        }
        // rotation symmetry: P(z=l|x=l) identical across l
        let diag: Vec<f64> = (0..8).map(|l| probs[l][l]).collect();
        for l in 1..8 {
            assert!((diag[l] - diag[0]).abs() < 1e-9);
        }
        // cross-check against the wedge quadrature oracle
        let p00 = oracle::wedge_probability(0, 0, &ctx.cfg).unwrap();
        assert!(
            (probs[0][0] - p00).abs() < 1e-6,
            "region-operator route {} vs quadrature {p00}",
            probs[0][0]
        );
    }

    #[test]
    fn delta_ec_closed_cases() {
        // uniform and independent: δ_EC = H(Z) = 3 bits at β = 1
        let uniform = vec![vec![0.125; 8]; 8];
        let priors = vec![0.125; 8];
        let d = delta_ec_from_probs(&uniform, &priors, 1.0).unwrap();
        assert!((d - 3.0).abs() < 1e-12);

        // perfect correlation: H(Z|X) = 0, H(Z) = 3
        let perfect: Vec<Vec<f64>> = (0..8)
            .map(|x| (0..8).map(|z| if z == x { 1.0 } else { 0.0 }).collect())
            .collect();
        let d = delta_ec_from_probs(&perfect, &priors, 0.95).unwrap();
        assert!((d - 0.05 * 3.0).abs() < 1e-12);

        // β = 1 reduces to H(Z|X)
        let skew = vec![
            vec![0.7, 0.3, 0.0, 0.0],
            vec![0.0, 0.6, 0.4, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.25, 0.25, 0.25, 0.25],
        ];
        let qp = vec![0.25; 4];
        let d1 = delta_ec_from_probs(&skew, &qp, 1.0).unwrap();
        let hzx = 0.25 * (entropy_bits(&[0.7, 0.3]) + entropy_bits(&[0.6, 0.4]) + 0.0 + 2.0);
        assert!((d1 - hzx).abs() < 1e-12);
    }

    #[test]
    fn delta_ec_nonincreasing_in_beta() {
        let (ctx, rho) = lossless_8psk_ctx(8);
        let probs = ctx.conditional_probabilities(&rho);
        let mut prev = f64::INFINITY;
        for beta in [0.5, 0.7, 0.9, 1.0] {
            let d = delta_ec_from_probs(&probs, &ctx.cfg.probs, beta).unwrap();
            assert!(d <= prev + 1e-12);
            prev = d;
        }
    }

    #[test]
    fn delta_ec_undefined_when_everything_postselected() {
        let zero = vec![vec![0.0; 8]; 8];
        let priors = vec![0.125; 8];
        assert!(matches!(
            delta_ec_from_probs(&zero, &priors, 0.95),
            Err(ObjectiveError::UndefinedRate)
        ));
    }

    #[test]
    fn perturbed_identity_objective_consistency() {
        // pure sanity: f on the maximally mixed state is finite and small-ish
        let ctx = qpsk_ctx(4);
        let n = ctx.dim();
        let rho = fock::HermitianOperator::identity(n).scaled(1.0 / n as f64);
        let v = ctx.value(&rho).unwrap();
        assert!(v.is_finite() && v >= 0.0 && v < 3.0, "f = {v}");
    }
}
