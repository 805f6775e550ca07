//! Reward-model objective, policy preference losses and a toy linear reward model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },
}

/// Logistic function, evaluated without overflow for any finite input.
pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `ln σ(x)`.
pub fn log_sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Loss value with its partial derivatives w.r.t. the chosen and rejected inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLoss<F> {
    pub loss: F,
    pub d_chosen: F,
    pub d_rejected: F,
}

impl<F: Scalar> PairLoss<F> {
    fn add(self, other: Self) -> Self {
        PairLoss {
            loss: self.loss + other.loss,
            d_chosen: self.d_chosen + other.d_chosen,
            d_rejected: self.d_rejected + other.d_rejected,
        }
    }

    fn scale_grad(self, k: F) -> Self {
        PairLoss { loss: self.loss, d_chosen: self.d_chosen * k, d_rejected: self.d_rejected * k }
    }
}

/// Bradley-Terry loss `-ln σ(r_c - r_r)`.
pub fn bt_loss<F: Scalar>(r_c: F, r_r: F) -> PairLoss<F> {
    let d = r_c - r_r;
    let s = sigmoid(-d); // 1 - σ(d)
    PairLoss { loss: -log_sigmoid(d), d_chosen: -s, d_rejected: s }
}

/// Absolute-reward term `-ln σ(r_c) - ln σ(-r_r)`.
pub fn dr_loss<F: Scalar>(r_c: F, r_r: F) -> PairLoss<F> {
    PairLoss {
        loss: -log_sigmoid(r_c) - log_sigmoid(-r_r),
        d_chosen: -sigmoid(-r_c),
        d_rejected: sigmoid(r_r),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum PairSource {
    #[default]
    TreePipeline,
    General,
}

/// Which terms the toy trainer optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// BT + DR for tree-pipeline pairs, BT alone for general pairs.
    #[default]
    Ultra,
    BtOnly,
    DrOnly,
}

impl Objective {
    pub fn pair_loss<F: Scalar>(self, source: PairSource, r_c: F, r_r: F) -> PairLoss<F> {
        match (self, source) {
            (Objective::Ultra, PairSource::TreePipeline) => bt_loss(r_c, r_r).add(dr_loss(r_c, r_r)),
            (Objective::Ultra, PairSource::General) | (Objective::BtOnly, _) => bt_loss(r_c, r_r),
            (Objective::DrOnly, _) => dr_loss(r_c, r_r),
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = LossError;
    fn from_str(s: &str) -> Result<Self, LossError> {
        match s {
            "ultra" => Ok(Objective::Ultra),
            "bt" | "bt_only" => Ok(Objective::BtOnly),
            "dr" | "dr_only" => Ok(Objective::DrOnly),
            other => Err(LossError::Config(format!("unknown objective {other:?}"))),
        }
    }
}

/// Linear reward `w·φ + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardParams<F> {
    pub w: Vec<F>,
    pub b: F,
}

impl<F: Scalar> RewardParams<F> {
    pub fn zeros(dim: usize) -> Self {
        RewardParams { w: vec![F::zero(); dim], b: F::zero() }
    }

    pub fn reward(&self, phi: &[F]) -> F {
        debug_assert_eq!(phi.len(), self.w.len());
        self.w.iter().zip(phi).map(|(w, x)| *w * *x).sum::<F>() + self.b
    }

    pub fn is_finite(&self) -> bool {
        self.b.is_finite() && self.w.iter().all(|w| w.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefExample<F> {
    pub phi_chosen: Vec<F>,
    pub phi_rejected: Vec<F>,
    #[serde(default)]
    pub source: PairSource,
}

/// Loss and gradient w.r.t. reward parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLoss<F> {
    pub loss: F,
    pub grad: RewardParams<F>,
}

/// Composite reward-model objective on one example, with gradient through `r = w·φ + b`.
pub fn ultra_loss<F: Scalar>(example: &PrefExample<F>, params: &RewardParams<F>) -> ParamLoss<F> {
    objective_loss(Objective::Ultra, example, params)
}

pub fn objective_loss<F: Scalar>(
    objective: Objective,
    example: &PrefExample<F>,
    params: &RewardParams<F>,
) -> ParamLoss<F> {
    let r_c = params.reward(&example.phi_chosen);
    let r_r = params.reward(&example.phi_rejected);
    let pl = objective.pair_loss(example.source, r_c, r_r);
    let w = example
        .phi_chosen
        .iter()
        .zip(&example.phi_rejected)
        .map(|(c, r)| pl.d_chosen * *c + pl.d_rejected * *r)
        .collect();
    ParamLoss { loss: pl.loss, grad: RewardParams { w, b: pl.d_chosen + pl.d_rejected } }
}

/// Policy-minus-reference log-probabilities of a chosen and a rejected response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyPairLogRatio<F> {
    pub delta_chosen: F,
    pub delta_rejected: F,
}

impl<F: Scalar> PolicyPairLogRatio<F> {
    pub fn new(delta_chosen: F, delta_rejected: F) -> Self {
        PolicyPairLogRatio { delta_chosen, delta_rejected }
    }

    /// Implicit rewards `(βΔ_c, βΔ_r)`.
    pub fn implicit_rewards(&self, beta: F) -> (F, F) {
        (beta * self.delta_chosen, beta * self.delta_rejected)
    }
}

/// `-ln σ(β(Δ_c - Δ_r))`. Gradients are w.r.t. the Δs.
pub fn dpo_loss<F: Scalar>(pair: &PolicyPairLogRatio<F>, beta: F) -> PairLoss<F> {
    let z = beta * (pair.delta_chosen - pair.delta_rejected);
    let s = sigmoid(-z);
    PairLoss { loss: -log_sigmoid(z), d_chosen: -beta * s, d_rejected: beta * s }
}

/// KTO with a fixed reference point; `λ_- = 1`, `λ_+ = lambda_ratio`.
pub fn kto_loss<F: Scalar>(
    pair: &PolicyPairLogRatio<F>,
    beta: F,
    lambda_ratio: F,
    z_ref: F,
) -> Result<PairLoss<F>, LossError> {
    if lambda_ratio.is_nan() || lambda_ratio <= F::zero() || !lambda_ratio.is_finite() {
        return Err(LossError::Config(format!("lambda_ratio must be positive, got {lambda_ratio}")));
    }
    let lambda_pos = lambda_ratio;
    let lambda_neg = F::one();
    let u = beta * (pair.delta_chosen - z_ref);
    let v = beta * (z_ref - pair.delta_rejected);
    let su = sigmoid(u);
    let sv = sigmoid(v);
    Ok(PairLoss {
        loss: lambda_pos * (F::one() - su) + lambda_neg * (F::one() - sv),
        d_chosen: -lambda_pos * beta * su * (F::one() - su),
        d_rejected: lambda_neg * beta * sv * (F::one() - sv),
    })
}

/// NCA pair loss: `-ln σ(r_c) - ½ ln σ(-r_c) - ½ ln σ(-r_r)` with `r = βΔ`.
pub fn nca_loss<F: Scalar>(pair: &PolicyPairLogRatio<F>, beta: F) -> PairLoss<F> {
    let (r_c, r_r) = pair.implicit_rewards(beta);
    let h = F::half();
    PairLoss {
        loss: -log_sigmoid(r_c) - h * log_sigmoid(-r_c) - h * log_sigmoid(-r_r),
        d_chosen: -sigmoid(-r_c) + h * sigmoid(r_c),
        d_rejected: h * sigmoid(r_r),
    }
    .scale_grad(beta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig<F> {
    pub beta: F,
    pub lambda_ratio: F,
    pub learning_rate: F,
    pub steps: usize,
    pub seed: u64,
    pub objective: Objective,
    /// Weights start uniform in `[-init_scale, init_scale]`.
    pub init_scale: F,
    pub init_bias: F,
}

impl<F: Scalar> Default for TrainConfig<F> {
    fn default() -> Self {
        TrainConfig {
            beta: F::lit(0.1),
            lambda_ratio: F::lit(1.33),
            learning_rate: F::lit(0.1),
            steps: 200,
            seed: 0,
            objective: Objective::Ultra,
            init_scale: F::lit(0.01),
            init_bias: F::zero(),
        }
    }
}

impl<F: Scalar> TrainConfig<F> {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.learning_rate.is_nan() || self.learning_rate <= F::zero() || !self.learning_rate.is_finite() {
            return Err(LossError::Config("learning_rate must be positive".into()));
        }
        if self.lambda_ratio.is_nan() || self.lambda_ratio <= F::zero() {
            return Err(LossError::Config("lambda_ratio must be positive".into()));
        }
        if self.beta.is_nan() || self.beta <= F::zero() {
            return Err(LossError::Config("beta must be positive".into()));
        }
        if self.init_scale.is_nan() || self.init_scale < F::zero() || !self.init_bias.is_finite() {
            return Err(LossError::Config("bad initialisation".into()));
        }
        Ok(())
    }
}

/// Per-step reward statistics, recorded after each update.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardTrace<F> {
    pub chosen_mean: Vec<F>,
    pub rejected_mean: Vec<F>,
    pub margin: Vec<F>,
    /// Objective value before each update.
    pub loss: Vec<F>,
}

impl<F: Scalar> RewardTrace<F> {
    pub fn len(&self) -> usize {
        self.chosen_mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chosen_mean.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,chosen_mean,rejected_mean,margin\n");
        for i in 0..self.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                i + 1,
                self.chosen_mean[i],
                self.rejected_mean[i],
                self.margin[i]
            ));
        }
        out
    }
}

/// Mean chosen and rejected reward over a dataset.
pub fn mean_rewards<F: Scalar>(data: &[PrefExample<F>], params: &RewardParams<F>) -> (F, F) {
    let n = F::from_usize(data.len()).unwrap_or_else(F::one);
    let c = data.iter().map(|e| params.reward(&e.phi_chosen)).sum::<F>() / n;
    let r = data.iter().map(|e| params.reward(&e.phi_rejected)).sum::<F>() / n;
    (c, r)
}

fn check_dataset<F: Scalar>(data: &[PrefExample<F>]) -> Result<usize, LossError> {
    let first = data.first().ok_or_else(|| LossError::Dataset("empty dataset".into()))?;
    let dim = first.phi_chosen.len();
    for (i, e) in data.iter().enumerate() {
        if e.phi_chosen.len() != dim || e.phi_rejected.len() != dim {
            return Err(LossError::Dataset(format!("example {i}: dimension mismatch (expected {dim})")));
        }
        if e.phi_chosen.iter().chain(&e.phi_rejected).any(|x| !x.is_finite()) {
            return Err(LossError::Dataset(format!("example {i}: non-finite feature")));
        }
    }
    Ok(dim)
}

/// Full-batch gradient descent on the mean objective.
pub fn train_toy_rm<F: Scalar>(
    data: &[PrefExample<F>],
    cfg: &TrainConfig<F>,
) -> Result<(RewardParams<F>, RewardTrace<F>), LossError> {
    cfg.validate()?;
    let dim = check_dataset(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = cfg.init_scale.to_f64().unwrap_or(0.0);
    let mut params = RewardParams {
        w: (0..dim)
            .map(|_| if scale > 0.0 { F::lit(rng.gen_range(-scale..=scale)) } else { F::zero() })
            .collect(),
        b: cfg.init_bias,
    };
    let n = F::from_usize(data.len()).unwrap_or_else(F::one);
    let mut trace = RewardTrace::default();
    for step in 0..cfg.steps {
        let mut loss = F::zero();
        let mut grad = RewardParams::zeros(dim);
        for e in data {
            let pl = objective_loss(cfg.objective, e, &params);
            loss = loss + pl.loss;
            for (g, d) in grad.w.iter_mut().zip(&pl.grad.w) {
                *g = *g + *d;
            }
            grad.b = grad.b + pl.grad.b;
        }
        loss = loss / n;
        if !loss.is_finite() {
            return Err(LossError::Diverged { step });
        }
        for (w, g) in params.w.iter_mut().zip(&grad.w) {
            *w = *w - cfg.learning_rate * *g / n;
        }
        params.b = params.b - cfg.learning_rate * grad.b / n;
        if !params.is_finite() {
            return Err(LossError::Diverged { step });
        }
        let (c, r) = mean_rewards(data, &params);
        trace.chosen_mean.push(c);
        trace.rejected_mean.push(r);
        trace.margin.push(c - r);
        trace.loss.push(loss);
    }
    Ok((params, trace))
}

pub mod synthetic {
    //! Gaussian-cluster preference data.
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    use super::{PairSource, PrefExample};
    use crate::scalar::Scalar;

    #[derive(Debug, Clone, PartialEq)]
    pub struct ClusterSpec {
        pub n: usize,
        pub dim: usize,
        /// Distance between cluster centres along the first axis.
        pub separation: f64,
        pub noise: f64,
        /// Append a constant 1.0 feature to every vector.
        pub bias_feature: bool,
        pub source: PairSource,
        pub seed: u64,
    }

    impl Default for ClusterSpec {
        fn default() -> Self {
            ClusterSpec {
                n: 64,
                dim: 4,
                separation: 4.0,
                noise: 0.5,
                bias_feature: false,
                source: PairSource::TreePipeline,
                seed: 0,
            }
        }
    }

    /// Chosen vectors around `+s/2·e₁`, rejected around `-s/2·e₁`.
    pub fn clusters<F: Scalar>(spec: &ClusterSpec) -> Vec<PrefExample<F>> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.noise.max(0.0)).expect("noise is finite");
        let mut draw = |sign: f64| -> Vec<F> {
            let mut v: Vec<F> = (0..spec.dim)
                .map(|j| {
                    let centre = if j == 0 { sign * spec.separation / 2.0 } else { 0.0 };
                    F::lit(centre + normal.sample(&mut rng))
                })
                .collect();
            if spec.bias_feature {
                v.push(F::one());
            }
            v
        };
        (0..spec.n)
            .map(|_| {
                let phi_chosen = draw(1.0);
                let phi_rejected = draw(-1.0);
                PrefExample { phi_chosen, phi_rejected, source: spec.source }
            })
            .collect()
    }
}
