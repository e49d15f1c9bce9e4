//! Latent-variable deep GP.
//!
//! The input is augmented with one latent coordinate `w ~ N(0, 1)` and pushed
//! through a stack of whitened sparse variational GP layers. Training
//! maximises an importance-weighted bound; the final layer's `q(u)` moves by
//! natural-gradient steps and everything else by Adam. Gradients are
//! hand-derived adjoints of the forward pass below.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::acquisition::quantile_moments;
use crate::error::{Error, Result};
use crate::evidence::EvidenceSet;
use crate::math::{cholesky_jittered, log_mean_exp, rbf_unchecked, Bounds, ParameterVector, RngStream, LN_2PI};
use crate::surrogate::{check_inside, CommonRandomNumbers, FitPhase, Moments, SurrogateKind, SurrogateModel};

/// Floor on marginal variances before the square root.
const VAR_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpConfig {
    /// GP layers after the latent-variable layer.
    pub gp_layers: usize,
    pub inducing: usize,
    pub importance_samples: usize,
    pub predict_samples: usize,
    pub initial_steps: usize,
    pub refresh_steps: usize,
    pub final_steps: usize,
    pub adam_lr: f64,
    pub natgrad_step: f64,
    pub initial_noise: f64,
    /// Initial `q_sqrt` scale of inner layers; the final layer starts at the prior.
    pub inner_q_sqrt: f64,
    /// Lloyd iterations after k-means++ seeding of the inducing inputs.
    pub kmeans_iterations: usize,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            gp_layers: 2,
            inducing: 50,
            importance_samples: 5,
            predict_samples: 20,
            initial_steps: 3000,
            refresh_steps: 500,
            final_steps: 3000,
            adam_lr: 0.005,
            natgrad_step: 0.01,
            initial_noise: 0.01,
            inner_q_sqrt: 1e-5,
            kmeans_iterations: 10,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.gp_layers == 0 {
            return bad("dgp.gp_layers must be >= 1");
        }
        if self.inducing == 0 || self.importance_samples == 0 || self.predict_samples == 0 {
            return bad("dgp.inducing, dgp.importance_samples and dgp.predict_samples must be >= 1");
        }
        if self.initial_steps == 0 || self.final_steps == 0 {
            return bad("dgp.initial_steps and dgp.final_steps must be >= 1");
        }
        if !(self.adam_lr > 0.0) || !(self.natgrad_step > 0.0 && self.natgrad_step <= 1.0) {
            return bad("dgp.adam_lr must be > 0 and dgp.natgrad_step in (0, 1]");
        }
        if !(self.initial_noise > 0.0) || !(self.inner_q_sqrt > 0.0) {
            return bad("dgp.initial_noise and dgp.inner_q_sqrt must be > 0");
        }
        Ok(())
    }
}

/// Whitened sparse variational GP layer with a shared unit-variance RBF
/// kernel over all outputs: `u = chol(Kzz) v`, `q(v_o) = N(m_o, L_o L_o^T)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SvgpLayer {
    z: DMatrix<f64>,
    log_ls: Vec<f64>,
    q_mu: DMatrix<f64>,
    q_sqrt: Vec<DMatrix<f64>>,
    identity_mean: bool,
}

/// Intermediate values of one batched forward pass.
struct LayerTape {
    x: DMatrix<f64>,
    lz: DMatrix<f64>,
    kzz: DMatrix<f64>,
    kzx: DMatrix<f64>,
    a: DMatrix<f64>,
    b: Vec<DMatrix<f64>>,
    var: DMatrix<f64>,
    eps: DMatrix<f64>,
}

/// Gradients of a scalar objective with respect to one layer.
#[derive(Clone, Debug)]
struct LayerGrad {
    z: DMatrix<f64>,
    log_ls: Vec<f64>,
    q_mu: DMatrix<f64>,
    q_sqrt: Vec<DMatrix<f64>>,
    /// Data part of the gradient with respect to each `S_o = L_o L_o^T`;
    /// filled for the final layer only.
    s: Vec<DMatrix<f64>>,
}

impl SvgpLayer {
    /// Layer at the prior `q(v) = N(0, I)` with lengthscales `sqrt(input dim)`.
    pub fn new(z: DMatrix<f64>, output_dim: usize, identity_mean: bool) -> Result<Self> {
        let (m, d) = z.shape();
        if m == 0 || d == 0 || output_dim == 0 {
            return Err(Error::Shape("layer needs at least one inducing point, input and output".into()));
        }
        if identity_mean && d != output_dim {
            return Err(Error::Shape(format!("identity mean needs equal dimensions, got {d} -> {output_dim}")));
        }
        Ok(Self {
            z,
            log_ls: vec![0.5 * (d as f64).ln(); d],
            q_mu: DMatrix::zeros(m, output_dim),
            q_sqrt: vec![DMatrix::identity(m, m); output_dim],
            identity_mean,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.z.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.q_mu.ncols()
    }

    pub fn inducing(&self) -> usize {
        self.z.nrows()
    }

    pub fn inducing_inputs(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.log_ls.iter().map(|v| v.exp()).collect()
    }

    pub fn set_lengthscales(&mut self, ls: &[f64]) -> Result<()> {
        if ls.len() != self.input_dim() || ls.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::InvalidHyperparameter(format!("bad lengthscales {ls:?}")));
        }
        self.log_ls = ls.iter().map(|l| l.ln()).collect();
        Ok(())
    }

    /// Sets the whitened variational mean and covariance factor of output `o`.
    pub fn set_variational(&mut self, o: usize, mean: &DVector<f64>, sqrt: &DMatrix<f64>) -> Result<()> {
        let m = self.inducing();
        if mean.len() != m || sqrt.shape() != (m, m) || o >= self.output_dim() {
            return Err(Error::Shape("variational parameters do not match the layer".into()));
        }
        self.q_mu.set_column(o, mean);
        self.q_sqrt[o] = sqrt.lower_triangle();
        Ok(())
    }

    pub fn variational_mean(&self) -> &DMatrix<f64> {
        &self.q_mu
    }

    pub fn variational_sqrt(&self, o: usize) -> &DMatrix<f64> {
        &self.q_sqrt[o]
    }

    fn inv_sq(&self) -> Vec<f64> {
        self.log_ls.iter().map(|v| (-2.0 * v).exp()).collect()
    }

    /// Cholesky factor of `Kzz + jitter`.
    fn factor(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let kzz = rbf_unchecked(&self.z, &self.z, &self.inv_sq(), 1.0);
        let (ch, _) = cholesky_jittered(&kzz)?;
        Ok((ch.unpack(), kzz))
    }

    /// KL(q(v) || N(0, I)) summed over outputs.
    pub fn kl(&self) -> f64 {
        let m = self.inducing() as f64;
        (0..self.output_dim())
            .map(|o| {
                let l = &self.q_sqrt[o];
                let trace: f64 = l.iter().map(|v| v * v).sum();
                let logdet: f64 = l.diagonal().iter().map(|v| 2.0 * v.abs().ln()).sum();
                let mu = self.q_mu.column(o);
                0.5 * (trace + mu.dot(&mu) - m - logdet)
            })
            .sum()
    }

    /// Marginal predictive means and variances for each row of `x`.
    pub fn predict_marginals(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check_input(x)?;
        let (lz, kzz) = self.factor()?;
        let eps = DMatrix::zeros(x.nrows(), self.output_dim());
        let (f, tape) = self.forward_with(x, &eps, lz, kzz);
        Ok((f, tape.var))
    }

    /// One reparameterised draw per row of `x`.
    pub fn sample(&self, x: &DMatrix<f64>, rng: &mut RngStream) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let (lz, kzz) = self.factor()?;
        let eps = DMatrix::from_fn(x.nrows(), self.output_dim(), |_, _| rng.normal());
        Ok(self.forward_with(x, &eps, lz, kzz).0)
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!("layer expects {} inputs, got {}", self.input_dim(), x.ncols())));
        }
        Ok(())
    }

    fn forward(&self, x: &DMatrix<f64>, eps: &DMatrix<f64>) -> Result<(DMatrix<f64>, LayerTape)> {
        let (lz, kzz) = self.factor()?;
        Ok(self.forward_with(x, eps, lz, kzz))
    }

    fn forward_with(&self, x: &DMatrix<f64>, eps: &DMatrix<f64>, lz: DMatrix<f64>, kzz: DMatrix<f64>) -> (DMatrix<f64>, LayerTape) {
        let n = x.nrows();
        let kzx = rbf_unchecked(&self.z, x, &self.inv_sq(), 1.0);
        let a = lz.solve_lower_triangular(&kzx).expect("factor has a positive diagonal");
        let a_sq: Vec<f64> = a.column_iter().map(|c| c.norm_squared()).collect();
        let mut f = a.transpose() * &self.q_mu;
        if self.identity_mean {
            f += x;
        }
        let mut var = DMatrix::zeros(n, self.output_dim());
        let mut b = Vec::with_capacity(self.output_dim());
        for o in 0..self.output_dim() {
            let bo = self.q_sqrt[o].transpose() * &a;
            for (j, col) in bo.column_iter().enumerate() {
                var[(j, o)] = 1.0 - a_sq[j] + col.norm_squared();
            }
            b.push(bo);
        }
        for j in 0..n {
            for o in 0..self.output_dim() {
                f[(j, o)] += var[(j, o)].max(VAR_FLOOR).sqrt() * eps[(j, o)];
            }
        }
        (f, LayerTape { x: x.clone(), lz, kzz, kzx, a, b, var, eps: eps.clone() })
    }

    /// Reverse pass: given the output adjoint, returns the input adjoint and
    /// parameter gradients (excluding the KL term).
    /// `var_bar`, when given, is the adjoint of the marginal variances and the
    /// sampling noise is ignored.
    fn backward(&self, tape: &LayerTape, f_bar: &DMatrix<f64>, var_bar: Option<&DMatrix<f64>>) -> (DMatrix<f64>, LayerGrad) {
        let (m, d, outs) = (self.inducing(), self.input_dim(), self.output_dim());
        let n = tape.x.nrows();
        let a = &tape.a;
        let mut x_bar = if self.identity_mean { f_bar.clone() } else { DMatrix::zeros(n, d) };

        let q_mu_bar = a * f_bar;
        let mut a_bar = &self.q_mu * f_bar.transpose();
        let mut v_total = vec![0.0; n];
        let mut q_sqrt_bar = Vec::with_capacity(outs);
        let mut s_bar = Vec::with_capacity(outs);
        for o in 0..outs {
            let v_bar: Vec<f64> = (0..n)
                .map(|j| {
                    let v = tape.var[(j, o)];
                    if let Some(vb) = var_bar {
                        vb[(j, o)]
                    } else if v > VAR_FLOOR {
                        f_bar[(j, o)] * tape.eps[(j, o)] / (2.0 * v.sqrt())
                    } else {
                        0.0
                    }
                })
                .collect();
            // A diag(v_bar)
            let mut av = a.clone();
            for (j, mut col) in av.column_iter_mut().enumerate() {
                col *= v_bar[j];
                v_total[j] += v_bar[j];
            }
            let mut bv = tape.b[o].clone();
            for (j, mut col) in bv.column_iter_mut().enumerate() {
                col *= 2.0 * v_bar[j];
            }
            a_bar += &self.q_sqrt[o] * &bv;
            q_sqrt_bar.push((&av * tape.b[o].transpose() * 2.0).lower_triangle());
            // only the natural-gradient (final) layer needs dL/dS
            if var_bar.is_some() {
                s_bar.push(&av * a.transpose());
            }
        }
        for (j, mut col) in a_bar.column_iter_mut().enumerate() {
            col.axpy(-2.0 * v_total[j], &a.column(j), 1.0);
        }

        let lz = &tape.lz;
        let lz_t = lz.transpose();
        let kzx_bar = lz_t.solve_upper_triangular(&a_bar).expect("factor has a positive diagonal");
        let lz_bar = -(&kzx_bar * a.transpose()).lower_triangle();
        let mut p = (&lz_t * lz_bar).lower_triangle();
        for i in 0..m {
            p[(i, i)] *= 0.5;
        }
        let y = lz_t.solve_upper_triangular(&p).expect("factor has a positive diagonal");
        let kzz_bar = lz_t.solve_upper_triangular(&y.transpose()).expect("factor has a positive diagonal").transpose();
        let h = (&kzz_bar + kzz_bar.transpose()).component_mul(&tape.kzz) * 0.5;
        let g = kzx_bar.component_mul(&tape.kzx);

        let inv_sq = self.inv_sq();
        let x = &tape.x;
        let z = &self.z;
        let g_row: Vec<f64> = g.row_iter().map(|r| r.sum()).collect();
        let g_col: Vec<f64> = g.column_iter().map(|c| c.sum()).collect();
        let h_row: Vec<f64> = h.row_iter().map(|r| r.sum()).collect();
        let gt_z = g.transpose() * z;
        let g_x = &g * x;
        let h_z = &h * z;
        let mut z_bar = DMatrix::zeros(m, d);
        let mut ls_bar = vec![0.0; d];
        for k in 0..d {
            for j in 0..n {
                x_bar[(j, k)] += (gt_z[(j, k)] - x[(j, k)] * g_col[j]) * inv_sq[k];
            }
            for i in 0..m {
                z_bar[(i, k)] = (g_x[(i, k)] - z[(i, k)] * g_row[i] + 2.0 * (h_z[(i, k)] - z[(i, k)] * h_row[i])) * inv_sq[k];
            }
            // sum_ij G_ij (z_ik - x_jk)^2 and the Kzz analogue
            let mut acc = 0.0;
            for i in 0..m {
                acc += g_row[i] * z[(i, k)] * z[(i, k)] - 2.0 * z[(i, k)] * g_x[(i, k)];
                acc += 2.0 * (h_row[i] * z[(i, k)] * z[(i, k)] - z[(i, k)] * h_z[(i, k)]);
            }
            for j in 0..n {
                acc += g_col[j] * x[(j, k)] * x[(j, k)];
            }
            ls_bar[k] = acc * inv_sq[k];
        }
        (x_bar, LayerGrad { z: z_bar, log_ls: ls_bar, q_mu: q_mu_bar, q_sqrt: q_sqrt_bar, s: s_bar })
    }

    /// Adds the gradient of `-KL` to `g`.
    fn add_neg_kl_grad(&self, g: &mut LayerGrad) {
        g.q_mu -= &self.q_mu;
        for o in 0..self.output_dim() {
            let l = &self.q_sqrt[o];
            g.q_sqrt[o] -= l;
            for i in 0..self.inducing() {
                g.q_sqrt[o][(i, i)] += 1.0 / l[(i, i)];
            }
        }
    }
}

/// Frozen sampling noise for one evaluation of the training bound.
#[derive(Clone, Debug)]
pub struct TrainingNoise {
    /// Latent-variable noise, `N * k` entries, datapoint-major.
    pub zeta: Vec<f64>,
    /// Per inner layer, `(N * k) x outputs` standard normals. The final layer
    /// is integrated analytically.
    pub layers: Vec<DMatrix<f64>>,
}

#[derive(Clone, Debug)]
struct ModelGrad {
    layers: Vec<LayerGrad>,
    lv_mean: Vec<f64>,
    lv_log_var: Vec<f64>,
    log_noise: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LvDgpModel {
    config: DgpConfig,
    bounds: Bounds,
    layers: Vec<SvgpLayer>,
    lv_mean: Vec<f64>,
    lv_log_var: Vec<f64>,
    log_noise: f64,
    evidence: Option<EvidenceSet>,
    trace: Vec<f64>,
    trained: bool,
    #[serde(skip)]
    factors: Option<Vec<(DMatrix<f64>, DMatrix<f64>)>>,
}

impl LvDgpModel {
    /// Untrained model; layers are built on the first fit.
    pub fn new(bounds: Bounds, config: DgpConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            bounds,
            layers: Vec::new(),
            lv_mean: Vec::new(),
            lv_log_var: Vec::new(),
            log_noise: 0.0,
            evidence: None,
            trace: Vec::new(),
            trained: false,
            factors: None,
        })
    }

    /// Builds layers from explicit parts; used by tests and checkpoints.
    pub fn from_parts(bounds: Bounds, config: DgpConfig, layers: Vec<SvgpLayer>, noise: f64, n_points: usize) -> Result<Self> {
        if !(noise > 0.0) {
            return Err(Error::InvalidHyperparameter(format!("likelihood variance must be positive, got {noise}")));
        }
        let mut model = Self::new(bounds, config)?;
        model.layers = layers;
        model.log_noise = noise.ln();
        model.lv_mean = vec![0.0; n_points];
        model.lv_log_var = vec![0.0; n_points];
        Ok(model)
    }

    pub fn config(&self) -> &DgpConfig {
        &self.config
    }

    pub fn layers(&self) -> &[SvgpLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [SvgpLayer] {
        self.factors = None;
        &mut self.layers
    }

    /// Likelihood variance in standardized units.
    pub fn noise(&self) -> f64 {
        self.log_noise.exp()
    }

    pub fn set_noise(&mut self, noise: f64) -> Result<()> {
        if !(noise > 0.0) {
            return Err(Error::InvalidHyperparameter(format!("likelihood variance must be positive, got {noise}")));
        }
        self.log_noise = noise.ln();
        Ok(())
    }

    /// Variational `(a_n, b_n)` of training point `n`.
    pub fn latent_posterior(&self, n: usize) -> Result<(f64, f64)> {
        match (self.lv_mean.get(n), self.lv_log_var.get(n)) {
            (Some(a), Some(lb)) => Ok((*a, lb.exp())),
            _ => Err(Error::State(format!("no latent variational parameters registered for point {n}"))),
        }
    }

    pub fn set_latent_posterior(&mut self, n: usize, mean: f64, variance: f64) -> Result<()> {
        if n >= self.lv_mean.len() {
            return Err(Error::State(format!("no latent variational parameters registered for point {n}")));
        }
        if !(variance > 0.0) {
            return Err(Error::InvalidHyperparameter(format!("latent variance must be positive, got {variance}")));
        }
        self.lv_mean[n] = mean;
        self.lv_log_var[n] = variance.ln();
        Ok(())
    }

    /// Smoothed-or-raw bound values recorded during training, one per step.
    pub fn elbo_trace(&self) -> &[f64] {
        &self.trace
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn evidence(&self) -> Option<&EvidenceSet> {
        self.evidence.as_ref()
    }

    fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input_dim())
    }

    /// Appends the latent coordinate to `theta`: in training mode point `n`'s
    /// `a_n + sqrt(b_n) * zeta`, otherwise a prior draw `zeta`.
    pub fn lv_layer_augment(&self, theta: &[f64], train_point: Option<usize>, zeta: f64) -> Result<Vec<f64>> {
        let w = match train_point {
            Some(n) => {
                let (a, b) = self.latent_posterior(n)?;
                a + b.sqrt() * zeta
            }
            None => zeta,
        };
        let mut out = theta.to_vec();
        out.push(w);
        Ok(out)
    }

    /// Fresh noise for one evaluation of the bound on `n` points.
    pub fn draw_training_noise(&self, n: usize, rng: &mut RngStream) -> TrainingNoise {
        let rows = n * self.config.importance_samples;
        TrainingNoise {
            zeta: (0..rows).map(|_| rng.normal()).collect(),
            layers: self.layers[..self.layers.len().saturating_sub(1)]
                .iter()
                .map(|l| DMatrix::from_fn(rows, l.output_dim(), |_, _| rng.normal()))
                .collect(),
        }
    }

    /// Importance-weighted bound on standardized data with frozen noise.
    pub fn iwvi_elbo(&self, x: &DMatrix<f64>, y: &DVector<f64>, noise: &TrainingNoise) -> Result<f64> {
        Ok(self.bound(x, y, noise, false)?.0)
    }

    fn bound(&self, x: &DMatrix<f64>, y: &DVector<f64>, noise: &TrainingNoise, want_grad: bool) -> Result<(f64, Option<ModelGrad>)> {
        let (n, d) = x.shape();
        let k = self.config.importance_samples;
        if n == 0 {
            return Err(Error::InsufficientData("bound of an empty batch".into()));
        }
        if self.lv_mean.len() != n || y.len() != n || noise.zeta.len() != n * k {
            return Err(Error::Shape(format!("bound on {n} points with {} latent pairs", self.lv_mean.len())));
        }
        if self.layers.is_empty() || self.input_dim() != d + 1 {
            return Err(Error::State("model layers are not built for this input dimension".into()));
        }
        let sigma2 = self.noise();
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(Error::InvalidHyperparameter(format!("likelihood variance must be positive, got {sigma2}")));
        }
        let rows = n * k;
        let sd_w: Vec<f64> = self.lv_log_var.iter().map(|v| (0.5 * v).exp()).collect();
        let mut h = DMatrix::zeros(rows, d + 1);
        let mut w = vec![0.0; rows];
        for i in 0..n {
            for j in 0..k {
                let r = i * k + j;
                for c in 0..d {
                    h[(r, c)] = x[(i, c)];
                }
                w[r] = self.lv_mean[i] + sd_w[i] * noise.zeta[r];
                h[(r, d)] = w[r];
            }
        }
        let last = self.layers.len() - 1;
        if noise.layers.len() != last {
            return Err(Error::Shape("training noise drawn for a different layer stack".into()));
        }
        let mut tapes = Vec::with_capacity(self.layers.len());
        for (layer, eps) in self.layers[..last].iter().zip(&noise.layers) {
            let (f, tape) = layer.forward(&h, eps)?;
            h = f;
            tapes.push(tape);
        }
        // final layer: mean and variance, expectation of the log likelihood in closed form
        let (mu, tape) = self.layers[last].forward(&h, &DMatrix::zeros(rows, 1))?;
        let var = tape.var.clone();
        tapes.push(tape);
        let mut log_w = vec![0.0; rows];
        for i in 0..n {
            for j in 0..k {
                let r = i * k + j;
                let resid = y[i] - mu[(r, 0)];
                let ll = -0.5 * (LN_2PI + sigma2.ln() + (resid * resid + var[(r, 0)]) / sigma2);
                let zeta = noise.zeta[r];
                log_w[r] = ll - 0.5 * w[r] * w[r] + 0.5 * zeta * zeta + 0.5 * self.lv_log_var[i];
            }
        }
        let mut value = 0.0;
        let mut resp = vec![0.0; rows];
        for i in 0..n {
            let slice = &log_w[i * k..(i + 1) * k];
            let lme = log_mean_exp(slice)?;
            value += lme;
            for j in 0..k {
                resp[i * k + j] = (slice[j] - lme).exp() / k as f64;
            }
        }
        let kl: f64 = self.layers.iter().map(SvgpLayer::kl).sum();
        value -= kl;
        if !want_grad {
            return Ok((value, None));
        }

        let mut mu_bar = DMatrix::zeros(rows, 1);
        let mut var_bar = DMatrix::zeros(rows, 1);
        let mut log_noise_bar = 0.0;
        for i in 0..n {
            for j in 0..k {
                let r = i * k + j;
                let resid = y[i] - mu[(r, 0)];
                mu_bar[(r, 0)] = resp[r] * resid / sigma2;
                var_bar[(r, 0)] = -0.5 * resp[r] / sigma2;
                log_noise_bar += resp[r] * (-0.5 + 0.5 * (resid * resid + var[(r, 0)]) / sigma2);
            }
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let (mut bar, mut g) = self.layers[last].backward(&tapes[last], &mu_bar, Some(&var_bar));
        self.layers[last].add_neg_kl_grad(&mut g);
        grads.push(g);
        for (layer, tape) in self.layers[..last].iter().zip(&tapes).rev() {
            let (x_bar, mut g) = layer.backward(tape, &bar, None);
            layer.add_neg_kl_grad(&mut g);
            grads.push(g);
            bar = x_bar;
        }
        grads.reverse();
        let mut lv_mean = vec![0.0; n];
        let mut lv_log_var = vec![0.0; n];
        for i in 0..n {
            for j in 0..k {
                let r = i * k + j;
                let w_bar = bar[(r, d)] - resp[r] * w[r];
                lv_mean[i] += w_bar;
                lv_log_var[i] += w_bar * 0.5 * sd_w[i] * noise.zeta[r] + 0.5 * resp[r];
            }
        }
        Ok((value, Some(ModelGrad { layers: grads, lv_mean, lv_log_var, log_noise: log_noise_bar })))
    }

    /// Trainable parameters as one vector. Inner `q_sqrt` diagonals are in log
    /// space. The final layer's `q(u)` is included only when `with_final_q`.
    pub fn flat_params(&self, with_final_q: bool) -> Vec<f64> {
        let mut out = Vec::new();
        let last = self.layers.len().saturating_sub(1);
        for (li, layer) in self.layers.iter().enumerate() {
            out.extend(layer.z.iter());
            out.extend(&layer.log_ls);
            if li < last || with_final_q {
                out.extend(layer.q_mu.iter());
                for l in &layer.q_sqrt {
                    for c in 0..l.ncols() {
                        for r in c..l.nrows() {
                            out.push(if r == c && li < last { l[(r, c)].ln() } else { l[(r, c)] });
                        }
                    }
                }
            }
        }
        out.push(self.log_noise);
        out.extend(&self.lv_mean);
        out.extend(&self.lv_log_var);
        out
    }

    pub fn set_flat_params(&mut self, v: &[f64], with_final_q: bool) -> Result<()> {
        if v.len() != self.flat_params(with_final_q).len() {
            return Err(Error::Shape("flat parameter vector has the wrong length".into()));
        }
        let mut it = v.iter().copied();
        let last = self.layers.len().saturating_sub(1);
        for (li, layer) in self.layers.iter_mut().enumerate() {
            for val in layer.z.iter_mut() {
                *val = it.next().unwrap();
            }
            for val in layer.log_ls.iter_mut() {
                *val = it.next().unwrap();
            }
            if li < last || with_final_q {
                for val in layer.q_mu.iter_mut() {
                    *val = it.next().unwrap();
                }
                for l in layer.q_sqrt.iter_mut() {
                    for c in 0..l.ncols() {
                        for r in c..l.nrows() {
                            let raw = it.next().unwrap();
                            l[(r, c)] = if r == c && li < last { raw.exp() } else { raw };
                        }
                    }
                }
            }
        }
        self.log_noise = it.next().unwrap();
        for val in self.lv_mean.iter_mut() {
            *val = it.next().unwrap();
        }
        for val in self.lv_log_var.iter_mut() {
            *val = it.next().unwrap();
        }
        self.factors = None;
        Ok(())
    }

    fn flat_grad(&self, g: &ModelGrad, with_final_q: bool) -> Vec<f64> {
        let mut out = Vec::new();
        let last = self.layers.len() - 1;
        for (li, (layer, lg)) in self.layers.iter().zip(&g.layers).enumerate() {
            out.extend(lg.z.iter());
            out.extend(&lg.log_ls);
            if li < last || with_final_q {
                out.extend(lg.q_mu.iter());
                for (l, lb) in layer.q_sqrt.iter().zip(&lg.q_sqrt) {
                    for c in 0..l.ncols() {
                        for r in c..l.nrows() {
                            out.push(if r == c && li < last { lb[(r, c)] * l[(r, c)] } else { lb[(r, c)] });
                        }
                    }
                }
            }
        }
        out.push(g.log_noise);
        out.extend(&g.lv_mean);
        out.extend(&g.lv_log_var);
        out
    }

    /// Bound and its gradient with respect to [`LvDgpModel::flat_params`].
    pub fn elbo_with_gradient(&self, x: &DMatrix<f64>, y: &DVector<f64>, noise: &TrainingNoise, with_final_q: bool) -> Result<(f64, Vec<f64>)> {
        let (value, g) = self.bound(x, y, noise, true)?;
        Ok((value, self.flat_grad(&g.expect("gradient requested"), with_final_q)))
    }

    /// Builds the layer stack on standardized inputs `x` (rows).
    fn build_layers(&mut self, x: &DMatrix<f64>, rng: &mut RngStream) -> Result<()> {
        let (n, d) = x.shape();
        let m = self.config.inducing.min(n);
        let centers = kmeans_pp(x, m, self.config.kmeans_iterations, rng);
        let z = centers.insert_column(d, 0.0);
        let mut layers = Vec::with_capacity(self.config.gp_layers);
        for li in 0..self.config.gp_layers {
            let last = li + 1 == self.config.gp_layers;
            let mut layer = SvgpLayer::new(z.clone(), if last { 1 } else { d + 1 }, !last)?;
            if !last {
                let s = DMatrix::identity(m, m) * self.config.inner_q_sqrt;
                layer.q_sqrt = vec![s; d + 1];
            }
            layers.push(layer);
        }
        self.layers = layers;
        self.log_noise = self.config.initial_noise.ln();
        self.lv_mean = vec![0.0; n];
        self.lv_log_var = vec![0.0; n];
        self.factors = None;
        Ok(())
    }

    /// Maximises the bound on `evidence` for `steps` iterations.
    pub fn dgp_train(&mut self, evidence: &EvidenceSet, steps: usize, rng: &mut RngStream) -> Result<()> {
        if steps == 0 {
            return Err(Error::Config("training needs at least one step".into()));
        }
        let mut evidence = evidence.clone();
        if let Some(prev) = &self.evidence {
            evidence.adopt_standardizers(prev);
        }
        evidence.freeze_standardizers()?;
        let (x, y) = evidence.standardized()?;
        if self.layers.is_empty() {
            self.build_layers(&x, rng)?;
        } else if self.input_dim() != x.ncols() + 1 {
            return Err(Error::Shape("evidence dimension changed between fits".into()));
        }
        // new points start at the prior
        self.lv_mean.resize(x.nrows(), 0.0);
        self.lv_log_var.resize(x.nrows(), 0.0);
        self.factors = None;

        let mut adam = Adam::new(self.flat_params(false).len(), self.config.adam_lr);
        for step in 0..steps {
            let noise = self.draw_training_noise(x.nrows(), rng);
            let (value, g) = self.bound(&x, &y, &noise, true)?;
            if !value.is_finite() {
                return Err(Error::TrainingDiverged { step, snapshot: self.snapshot() });
            }
            let g = g.expect("gradient requested");
            let flat = self.flat_grad(&g, false);
            if flat.iter().any(|v| !v.is_finite()) {
                return Err(Error::TrainingDiverged { step, snapshot: self.snapshot() });
            }
            self.trace.push(value);
            self.natural_step(&g)?;
            let mut params = self.flat_params(false);
            adam.ascend(&mut params, &flat);
            self.set_flat_params(&params, false)?;
        }
        self.evidence = Some(evidence);
        self.trained = true;
        self.refresh_factors()?;
        Ok(())
    }

    /// Natural-gradient ascent on the final layer's `q(u)` in natural
    /// coordinates, halving the step if the precision loses definiteness.
    fn natural_step(&mut self, g: &ModelGrad) -> Result<()> {
        let last = self.layers.len() - 1;
        let gl = &g.layers[last];
        let layer = &mut self.layers[last];
        let m = layer.inducing();
        for o in 0..layer.output_dim() {
            let l = &layer.q_sqrt[o];
            let mu = layer.q_mu.column(o).into_owned();
            let l_inv = l.clone().solve_lower_triangular(&DMatrix::identity(m, m)).ok_or_else(|| {
                Error::NumericalFailure("final-layer covariance factor is singular".into())
            })?;
            let prec = l_inv.tr_mul(&l_inv);
            // d/dS of (data term - KL) and d/dm
            let mut grad_s = gl.s[o].clone() - (DMatrix::identity(m, m) - &prec) * 0.5;
            grad_s = (&grad_s + grad_s.transpose()) * 0.5;
            // gl.q_mu already includes -m from the KL term
            let grad_m = gl.q_mu.column(o).into_owned();
            let g1 = &grad_m - &grad_s * &mu * 2.0;
            let theta1 = &prec * &mu;
            let mut gamma = self.config.natgrad_step;
            let mut done = false;
            for _ in 0..20 {
                let new_prec = &prec - &grad_s * (2.0 * gamma);
                if let Some(ch) = nalgebra::Cholesky::new(new_prec) {
                    let s = ch.inverse();
                    let new_mu = &s * (&theta1 + &g1 * gamma);
                    if let Some(cs) = nalgebra::Cholesky::new((&s + s.transpose()) * 0.5) {
                        layer.q_mu.set_column(o, &new_mu);
                        layer.q_sqrt[o] = cs.unpack();
                        done = true;
                        break;
                    }
                }
                gamma *= 0.5;
            }
            if !done {
                return Err(Error::NumericalFailure("natural-gradient step lost positive definiteness".into()));
            }
        }
        Ok(())
    }

    fn snapshot(&self) -> String {
        let ls: Vec<Vec<f64>> = self.layers.iter().map(SvgpLayer::lengthscales).collect();
        format!(
            "noise={:e} lengthscales={ls:?} kl={:?} last_elbo={:?}",
            self.noise(),
            self.layers.iter().map(SvgpLayer::kl).collect::<Vec<_>>(),
            self.trace.last()
        )
    }

    fn refresh_factors(&mut self) -> Result<()> {
        self.factors = Some(self.layers.iter().map(SvgpLayer::factor).collect::<Result<Vec<_>>>()?);
        Ok(())
    }

    /// Propagates standardized `theta` with latent draws and layer noise from
    /// `crn`; returns standardized latent-function samples.
    fn propagate(&self, z_theta: &[f64], crn: &CommonRandomNumbers) -> Result<Vec<f64>> {
        if !self.trained {
            return Err(Error::State("deep GP has not been trained".into()));
        }
        let p = crn.samples();
        if crn.layers.len() != self.layers.len() {
            return Err(Error::Shape("random numbers drawn for a different layer stack".into()));
        }
        let d = z_theta.len();
        let mut h = DMatrix::from_fn(p, d + 1, |r, c| if c < d { z_theta[c] } else { crn.latent[r] });
        let owned;
        let factors = match &self.factors {
            Some(f) => f,
            None => {
                owned = self.layers.iter().map(SvgpLayer::factor).collect::<Result<Vec<_>>>()?;
                &owned
            }
        };
        for ((layer, eps), (lz, kzz)) in self.layers.iter().zip(&crn.layers).zip(factors) {
            h = layer.forward_with(&h, eps, lz.clone(), kzz.clone()).0;
        }
        Ok(h.column(0).iter().copied().collect())
    }

    fn standardizers(&self) -> Result<(&crate::math::Standardizer, &crate::math::Standardizer)> {
        self.evidence
            .as_ref()
            .ok_or_else(|| Error::State("deep GP has not been trained".into()))?
            .standardizers()
    }

    fn crn(&self, p: usize, rng: &mut RngStream) -> CommonRandomNumbers {
        CommonRandomNumbers {
            latent: (0..p).map(|_| rng.normal()).collect(),
            layers: self.layers.iter().map(|l| DMatrix::from_fn(p, l.output_dim(), |_, _| rng.normal())).collect(),
            likelihood: (0..p).map(|_| rng.normal()).collect(),
        }
    }

    /// `p` predictive draws of the discrepancy at `theta` in raw units,
    /// likelihood noise included.
    pub fn predict_samples(&self, theta: &[f64], p: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
        if !self.trained {
            return Err(Error::State("deep GP has not been trained".into()));
        }
        if p == 0 {
            return Err(Error::Config("need at least one predictive sample".into()));
        }
        check_inside(&self.bounds, theta)?;
        let crn = self.crn(p, rng);
        let (xs, ys) = self.standardizers()?;
        let f = self.propagate(&xs.transform_point(theta), &crn)?;
        let sd = self.noise().sqrt();
        Ok(f.iter().zip(&crn.likelihood).map(|(v, e)| ys.inverse1(v + sd * e)).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let c = DgpCheckpoint { format_version: 1, model: self.clone() };
        std::fs::write(path, serde_json::to_string(&c)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: DgpCheckpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if c.format_version != 1 {
            return Err(Error::Config(format!("unsupported deep GP checkpoint version {}", c.format_version)));
        }
        let mut model = c.model;
        model.config.validate()?;
        if model.trained {
            model.refresh_factors()?;
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct DgpCheckpoint {
    format_version: u32,
    model: LvDgpModel,
}

/// `p` predictive draws at `theta` from a trained model.
pub fn dgp_predict_samples(model: &LvDgpModel, theta: &ParameterVector, p: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
    model.predict_samples(theta.values(), p, rng)
}

/// Trains `model` on `evidence` for `steps` iterations.
pub fn dgp_train(model: &mut LvDgpModel, evidence: &EvidenceSet, steps: usize, rng: &mut RngStream) -> Result<()> {
    model.dgp_train(evidence, steps, rng)
}

impl SurrogateModel for LvDgpModel {
    fn kind(&self) -> SurrogateKind {
        match self.config.gp_layers {
            1 => SurrogateKind::LvGp,
            _ => SurrogateKind::Lv2Gp,
        }
    }

    fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    fn fit(&mut self, evidence: &EvidenceSet, phase: FitPhase, rng: &mut RngStream) -> Result<()> {
        let steps = match phase {
            FitPhase::Initial => self.config.initial_steps,
            FitPhase::Refresh(_) => self.config.refresh_steps,
            FitPhase::Final => self.config.final_steps,
        };
        if steps == 0 {
            // keep the parameters but register the new points
            let mut e = evidence.clone();
            if let Some(prev) = &self.evidence {
                e.adopt_standardizers(prev);
            }
            e.freeze_standardizers()?;
            self.lv_mean.resize(e.len(), 0.0);
            self.lv_log_var.resize(e.len(), 0.0);
            self.evidence = Some(e);
            return Ok(());
        }
        self.dgp_train(evidence, steps, rng)
    }

    fn draw_crn(&self, rng: &mut RngStream) -> CommonRandomNumbers {
        self.crn(self.config.predict_samples, rng)
    }

    fn moments(&self, theta: &[f64], quantile: f64, crn: &CommonRandomNumbers) -> Result<Moments> {
        let samples = self.latent_samples(theta, crn)?;
        let q = quantile_moments(&samples, quantile)?;
        Ok(Moments { mean: q.mean, variance: q.variance })
    }

    fn noise_variance(&self) -> f64 {
        let s = self.standardizers().map(|(_, ys)| ys.scale[0]).unwrap_or(1.0);
        self.noise() * s * s
    }

    fn latent_samples(&self, theta: &[f64], crn: &CommonRandomNumbers) -> Result<Vec<f64>> {
        check_inside(&self.bounds, theta)?;
        let (xs, ys) = self.standardizers()?;
        let f = self.propagate(&xs.transform_point(theta), crn)?;
        Ok(f.into_iter().map(|v| ys.inverse1(v)).collect())
    }
}

/// Adam ascent on a flat vector.
struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self { lr, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn ascend(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            params[i] += self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// k-means++ seeding followed by a few Lloyd iterations; returns `m` centres.
pub fn kmeans_pp(x: &DMatrix<f64>, m: usize, iterations: usize, rng: &mut RngStream) -> DMatrix<f64> {
    let (n, d) = x.shape();
    let m = m.min(n);
    let sq = |i: usize, c: &DMatrix<f64>, j: usize| -> f64 { (0..d).map(|k| (x[(i, k)] - c[(j, k)]).powi(2)).sum() };
    let mut centers = DMatrix::zeros(m, d);
    let mut chosen = vec![false; n];
    let first = rng.below(n);
    centers.set_row(0, &x.row(first));
    chosen[first] = true;
    let mut dist: Vec<f64> = (0..n).map(|i| sq(i, &centers, 0)).collect();
    for c in 1..m {
        let total: f64 = dist.iter().zip(&chosen).filter(|(_, ch)| !**ch).map(|(d, _)| d).sum();
        let pick = if total > 0.0 {
            let mut u = rng.uniform() * total;
            let mut pick = None;
            for i in 0..n {
                if chosen[i] {
                    continue;
                }
                pick = Some(i);
                u -= dist[i];
                if u <= 0.0 {
                    break;
                }
            }
            pick.expect("an unchosen point remains")
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen[*i]).collect();
            free[rng.below(free.len())]
        };
        chosen[pick] = true;
        centers.set_row(c, &x.row(pick));
        for i in 0..n {
            dist[i] = dist[i].min(sq(i, &centers, c));
        }
    }
    if m == n {
        return centers;
    }
    for _ in 0..iterations {
        let mut sums = DMatrix::<f64>::zeros(m, d);
        let mut counts = vec![0usize; m];
        for i in 0..n {
            let best = (0..m).min_by(|a, b| sq(i, &centers, *a).total_cmp(&sq(i, &centers, *b))).unwrap();
            counts[best] += 1;
            for k in 0..d {
                sums[(best, k)] += x[(i, k)];
            }
        }
        for c in 0..m {
            if counts[c] > 0 {
                for k in 0..d {
                    centers[(c, k)] = sums[(c, k)] / counts[c] as f64;
                }
            }
        }
    }
    centers
}
