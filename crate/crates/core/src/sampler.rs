//! Deterministic DDIM sampling with classifier-free guidance and the
//! content-prior start.

use cdst_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{InjectionPolicy, Model};
use crate::embed::TokenSet;
use crate::error::{CdstError, Result};

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 0.00085;
pub const DEFAULT_BETA_END: f64 = 0.012;

/// Cumulative signal coefficients `alpha_bar[0..=T]` with `alpha_bar[0] = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    t: usize,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    /// Builds a schedule from explicit coefficients, which must start at 1
    /// and decrease strictly within `(0, 1]`.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        let ok = alpha_bar.len() >= 2
            && alpha_bar[0] == 1.0
            && alpha_bar.windows(2).all(|w| w[1] < w[0])
            && alpha_bar.iter().all(|&a| a > 0.0 && a <= 1.0);
        if !ok {
            return Err(CdstError::InvalidParameter(
                "alpha_bar must start at 1 and decrease strictly within (0, 1]".into(),
            ));
        }
        Ok(Self {
            t: alpha_bar.len() - 1,
            alpha_bar,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.t
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `steps` uniformly spaced timesteps `round(k T / steps)` for
    /// `k = steps..1`, descending.
    pub fn timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.t {
            return Err(CdstError::InvalidParameter(format!("steps {steps} outside [1, {}]", self.t)));
        }
        Ok((1..=steps)
            .rev()
            .map(|k| ((k * self.t) as f64 / steps as f64).round() as usize)
            .collect())
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.t {
            return Err(CdstError::InvalidParameter(format!("timestep {t} outside [0, {}]", self.t)));
        }
        Ok(())
    }
}

/// Scaled-linear schedule: `beta_i` interpolates linearly in `sqrt(beta)`.
pub fn make_schedule(t: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if t == 0 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(CdstError::InvalidParameter(format!(
            "need T >= 1 and 0 < beta_start < beta_end < 1, got T={t}, [{beta_start}, {beta_end}]"
        )));
    }
    let (s0, s1) = (beta_start.sqrt(), beta_end.sqrt());
    let mut alpha_bar = Vec::with_capacity(t + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for i in 0..t {
        let frac = if t == 1 { 0.0 } else { i as f64 / (t - 1) as f64 };
        let sb = s0 + frac * (s1 - s0);
        acc *= 1.0 - sb * sb;
        alpha_bar.push(acc);
    }
    DiffusionSchedule::from_alpha_bar(alpha_bar)
}

pub fn default_schedule() -> DiffusionSchedule {
    make_schedule(DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
}

fn check_lambda(lambda_p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda_p) {
        return Err(CdstError::InvalidParameter(format!("content prior strength {lambda_p} outside [0, 1]")));
    }
    Ok(())
}

/// `round((1 - lambda_p) T)` with halves rounded up.
pub fn content_prior_timestep(lambda_p: f64, sched: &DiffusionSchedule) -> Result<usize> {
    check_lambda(lambda_p)?;
    Ok((((1.0 - lambda_p) * sched.total_steps() as f64) + 0.5).floor() as usize)
}

/// `sqrt(ab_t) x + sqrt(1 - ab_t) eps` with seeded standard normal `eps`.
pub fn noise_latent(x: &Tensor, t: usize, sched: &DiffusionSchedule, seed: u64) -> Result<Tensor> {
    sched.check(t)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Tensor::randn(x.shape(), 1.0, &mut rng);
    let ab = sched.alpha_bar(t);
    Ok(x.lin_comb(ab.sqrt(), &eps, (1.0 - ab).sqrt())?)
}

/// Content prior `X_{t_P}` and `t_P = round((1 - lambda_p) T)`.
pub fn make_content_prior(x_c: &Tensor, lambda_p: f64, sched: &DiffusionSchedule, seed: u64) -> Result<(Tensor, usize)> {
    let t_p = content_prior_timestep(lambda_p, sched)?;
    Ok((noise_latent(x_c, t_p, sched, seed)?, t_p))
}

/// One deterministic reverse step from `t` to `t_prev`.
pub fn ddim_step(x_t: &Tensor, eps_hat: &Tensor, t: usize, t_prev: usize, sched: &DiffusionSchedule) -> Result<Tensor> {
    sched.check(t)?;
    if t_prev >= t {
        return Err(CdstError::InvalidParameter(format!("t_prev {t_prev} must be below t {t}")));
    }
    if x_t.shape() != eps_hat.shape() {
        return Err(CdstError::Shape(format!("x_t {:?} vs eps {:?}", x_t.shape(), eps_hat.shape())));
    }
    let (a_t, a_p) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    let ratio = (a_p / a_t).sqrt();
    let (s_t, s_p) = ((1.0 - a_t).sqrt(), (1.0 - a_p).sqrt());
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&x, &e)| ratio * (x - s_t * e) + s_p * e)
        .collect();
    Ok(Tensor::new(x_t.shape(), data)?)
}

/// `(1 - s) eps_uncond + s eps_cond`, exact at `s = 0` and `s = 1`.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, scale: f64) -> Result<Tensor> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(CdstError::Shape(format!("{:?} vs {:?}", eps_cond.shape(), eps_uncond.shape())));
    }
    Ok(eps_uncond.lin_comb(1.0 - scale, eps_cond, scale)?)
}

/// Anything that predicts noise for a latent at a timestep.
pub trait NoisePredictor {
    #[allow(clippy::too_many_arguments)]
    fn predict(
        &self,
        latent: &Tensor,
        t: usize,
        e_t: &TokenSet,
        e_s: Option<&TokenSet>,
        e_c: Option<&TokenSet>,
        policy: &InjectionPolicy,
        cond: Option<&[Tensor]>,
    ) -> Result<Tensor>;
}

impl NoisePredictor for Model {
    fn predict(
        &self,
        latent: &Tensor,
        t: usize,
        e_t: &TokenSet,
        e_s: Option<&TokenSet>,
        e_c: Option<&TokenSet>,
        policy: &InjectionPolicy,
        cond: Option<&[Tensor]>,
    ) -> Result<Tensor> {
        Model::predict(self, latent, t, e_t, e_s, e_c, policy, cond)
    }
}

/// Which streams the unconditional guidance branch removes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum UncondMode {
    /// Empty caption; style and color streams stay.
    #[default]
    TextOnly,
    /// Empty caption and no style or color tokens.
    AllStreams,
}

#[derive(Clone, Debug)]
pub struct ContentPrior {
    pub latent: Tensor,
    pub strength: f64,
}

#[derive(Clone, Debug)]
pub struct SampleRequest {
    pub e_t: TokenSet,
    /// Caption tokens for the unconditional branch.
    pub e_t_null: TokenSet,
    pub e_s: Option<TokenSet>,
    pub e_c: Option<TokenSet>,
    pub policy: InjectionPolicy,
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
    pub content_prior: Option<ContentPrior>,
    pub cond: Option<Vec<Tensor>>,
    pub uncond: UncondMode,
    /// Latent shape `[h, w, c]` used when there is no content prior.
    pub latent_shape: [usize; 3],
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub latent: Tensor,
    /// `(t, t_prev)` of every reverse step taken.
    pub trace: Vec<(usize, usize)>,
}

/// Largest scheduled timestep `<= t_p`, or 0 when none is.
pub fn snap_to_schedule(t_p: usize, schedule: &[usize]) -> usize {
    schedule.iter().copied().filter(|&t| t <= t_p).max().unwrap_or(0)
}

/// Reverse DDIM loop. Pure in (request, weights, schedule).
pub fn sample(req: &SampleRequest, model: &dyn NoisePredictor, sched: &DiffusionSchedule) -> Result<SampleOutput> {
    if req.steps > sched.total_steps() {
        return Err(CdstError::InvalidParameter(format!("steps {} > T {}", req.steps, sched.total_steps())));
    }
    let full = sched.timesteps(req.steps)?;
    let (mut x, ts) = match &req.content_prior {
        Some(cp) => {
            let t_start = snap_to_schedule(content_prior_timestep(cp.strength, sched)?, &full);
            let x = noise_latent(&cp.latent, t_start, sched, req.seed)?;
            (x, full.into_iter().filter(|&t| t <= t_start).collect::<Vec<_>>())
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
            (Tensor::randn(&req.latent_shape, 1.0, &mut rng), full)
        }
    };
    let (u_s, u_c) = match req.uncond {
        UncondMode::TextOnly => (req.e_s.as_ref(), req.e_c.as_ref()),
        UncondMode::AllStreams => (None, None),
    };
    let cond = req.cond.as_deref();
    let mut trace = Vec::with_capacity(ts.len());
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let e_cond = model.predict(&x, t, &req.e_t, req.e_s.as_ref(), req.e_c.as_ref(), &req.policy, cond)?;
        let e_unc = model.predict(&x, t, &req.e_t_null, u_s, u_c, &req.policy, cond)?;
        let eps = cfg_combine(&e_cond, &e_unc, req.cfg_scale)?;
        x = ddim_step(&x, &eps, t, t_prev, sched)?;
        trace.push((t, t_prev));
    }
    Ok(SampleOutput { latent: x, trace })
}
