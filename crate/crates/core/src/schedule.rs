//! Corruption schedules.
//!
//! The cumulative quantities (`alpha_bar`, `beta_bar`, `gamma_bar`) ramp
//! linearly in `t`; the per-step values are recovered from them. Index 0 of
//! every array is the identity step (`alpha = 1`, `beta = gamma = 0`).

use std::fmt;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Tolerance used by [`NoiseSchedule::validate`] and by the feasibility
/// clamp in [`build_schedule`].
pub const SCHEDULE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// MASK absorbing state plus uniform replacement.
    MaskAndReplace,
    /// Uniform replacement only; MASK is never visited.
    Uniform,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::MaskAndReplace => "mask-and-replace",
            Strategy::Uniform => "uniform",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask-and-replace" | "mask_and_replace" => Ok(Strategy::MaskAndReplace),
            "uniform" => Ok(Strategy::Uniform),
            other => Err(Error::InvalidArgument(format!("unknown strategy `{other}`"))),
        }
    }
}

/// How the uniform-noise endpoint is read.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UniformMass {
    /// Total replacement mass `K * beta_bar_T`.
    Total(f64),
    /// Per-entry `beta_bar_T`; the total mass is `K` times this.
    PerEntry(f64),
}

impl UniformMass {
    pub fn total(self, k: usize) -> f64 {
        match self {
            UniformMass::Total(m) => m,
            UniformMass::PerEntry(b) => b * k as f64,
        }
    }
}

/// Per-step (or per-segment) transition parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl StepParams {
    pub const IDENTITY: StepParams = StepParams {
        alpha: 1.0,
        beta: 0.0,
        gamma: 0.0,
    };

    /// Parameters of applying `self` first and then `next`.
    ///
    /// The family is closed under products: keep probabilities multiply,
    /// survive-unmasked probabilities multiply, and the replacement mass is
    /// what remains. Written in product form so a zero `beta` stays exactly
    /// zero.
    pub fn then(self, next: StepParams, k: usize) -> StepParams {
        StepParams {
            alpha: self.alpha * next.alpha,
            beta: self.alpha * next.beta + self.beta * next.alpha + k as f64 * self.beta * next.beta,
            gamma: 1.0 - (1.0 - self.gamma) * (1.0 - next.gamma),
        }
    }

    pub fn total(&self, k: usize) -> f64 {
        self.alpha + k as f64 * self.beta + self.gamma
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    k: usize,
    strategy: Strategy,
    step: Vec<StepParams>,
    cumulative: Vec<StepParams>,
}

/// First invariant found broken by [`NoiseSchedule::validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub t: usize,
    pub invariant: &'static str,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t = {}: {} ({})", self.t, self.invariant, self.detail)
    }
}

fn feasible(t: usize, name: &str, v: f64) -> Result<f64> {
    if !v.is_finite() || !(-SCHEDULE_TOL..=1.0 + SCHEDULE_TOL).contains(&v) {
        return Err(Error::InfeasibleSchedule {
            t,
            reason: format!("{name} = {v} outside [0, 1]"),
        });
    }
    Ok(v.clamp(0.0, 1.0))
}

/// Builds a `steps`-step schedule with linear cumulative ramps ending at
/// `gamma_bar_end` (MASK mass) and `uniform_mass_end` (`K * beta_bar_T`).
pub fn build_schedule(
    steps: usize,
    k: usize,
    gamma_bar_end: f64,
    uniform_mass_end: f64,
    strategy: Strategy,
) -> Result<NoiseSchedule> {
    if steps == 0 || k == 0 {
        return Err(Error::InvalidArgument("need T >= 1 and K >= 1".into()));
    }
    if !(0.0..=1.0).contains(&gamma_bar_end)
        || !(0.0..=1.0).contains(&uniform_mass_end)
        || gamma_bar_end + uniform_mass_end > 1.0 + SCHEDULE_TOL
    {
        return Err(Error::InvalidArgument(format!(
            "endpoints gamma_bar_T = {gamma_bar_end}, uniform mass = {uniform_mass_end} must be probabilities summing to at most 1"
        )));
    }
    if strategy == Strategy::Uniform && gamma_bar_end != 0.0 {
        return Err(Error::InvalidArgument(
            "uniform strategy requires gamma_bar_T = 0".into(),
        ));
    }
    let kf = k as f64;
    let cumulative: Vec<StepParams> = (0..=steps)
        .map(|t| {
            let frac = t as f64 / steps as f64;
            let gamma = gamma_bar_end * frac;
            let mass = uniform_mass_end * frac;
            StepParams {
                alpha: (1.0 - gamma - mass).max(0.0),
                beta: mass / kf,
                gamma,
            }
        })
        .collect();

    let mut step = vec![StepParams::IDENTITY];
    for t in 1..=steps {
        let (prev, cur) = (cumulative[t - 1], cumulative[t]);
        if prev.alpha <= 0.0 {
            return Err(Error::InfeasibleSchedule {
                t,
                reason: "alpha_bar reached 0 before the final step".into(),
            });
        }
        let alpha = feasible(t, "alpha", cur.alpha / prev.alpha)?;
        // 1 - gamma_t: probability an ordinary token stays unmasked this step
        let keep_unmasked = (1.0 - cur.gamma) / (1.0 - prev.gamma);
        let gamma = feasible(t, "gamma", 1.0 - keep_unmasked)?;
        let beta = feasible(t, "beta", (keep_unmasked - alpha) / kf)?;
        step.push(StepParams { alpha, beta, gamma });
    }
    let s = NoiseSchedule {
        k,
        strategy,
        step,
        cumulative,
    };
    if let Err(v) = s.validate() {
        return Err(Error::InfeasibleSchedule {
            t: v.t,
            reason: v.to_string(),
        });
    }
    Ok(s)
}

impl NoiseSchedule {
    /// Builds a schedule from explicit per-step parameters (index 1..=T);
    /// cumulative values are the running products.
    pub fn from_steps(k: usize, strategy: Strategy, steps: &[StepParams]) -> Result<Self> {
        if steps.is_empty() || k == 0 {
            return Err(Error::InvalidArgument("need T >= 1 and K >= 1".into()));
        }
        let mut step = vec![StepParams::IDENTITY];
        let mut cumulative = vec![StepParams::IDENTITY];
        for (i, &p) in steps.iter().enumerate() {
            let t = i + 1;
            for (name, v) in [("alpha", p.alpha), ("beta", p.beta), ("gamma", p.gamma)] {
                feasible(t, name, v)?;
            }
            if (p.total(k) - 1.0).abs() > SCHEDULE_TOL {
                return Err(Error::InfeasibleSchedule {
                    t,
                    reason: format!("alpha + K beta + gamma = {}", p.total(k)),
                });
            }
            step.push(p);
            cumulative.push(cumulative[i].then(p, k));
        }
        let s = Self {
            k,
            strategy,
            step,
            cumulative,
        };
        if let Err(v) = s.validate() {
            return Err(Error::InfeasibleSchedule {
                t: v.t,
                reason: v.to_string(),
            });
        }
        Ok(s)
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.step.len() - 1
    }

    pub fn vocab(&self) -> usize {
        self.k
    }

    pub fn mask_index(&self) -> usize {
        self.k
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    /// Per-step parameters of step `t` (1..=T; 0 is the identity).
    pub fn step(&self, t: usize) -> StepParams {
        self.step[t]
    }

    /// Cumulative parameters after `t` steps (0..=T).
    pub fn cumulative(&self, t: usize) -> StepParams {
        self.cumulative[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.step[t].alpha
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.step[t].beta
    }

    pub fn gamma(&self, t: usize) -> f64 {
        self.step[t].gamma
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.cumulative[t].alpha
    }

    pub fn beta_bar(&self, t: usize) -> f64 {
        self.cumulative[t].beta
    }

    pub fn gamma_bar(&self, t: usize) -> f64 {
        self.cumulative[t].gamma
    }

    /// Overwrites one step without any checking. Exists so verification
    /// tooling can prove that [`validate`](Self::validate) catches corruption.
    pub fn set_step_unchecked(&mut self, t: usize, params: StepParams) {
        self.step[t] = params;
    }

    /// Checks every schedule invariant to [`SCHEDULE_TOL`] and reports the
    /// first one violated.
    pub fn validate(&self) -> std::result::Result<(), Violation> {
        let k = self.k as f64;
        let fail = |t, invariant, detail: String| Err(Violation { t, invariant, detail });
        if self.cumulative[0] != StepParams::IDENTITY {
            return fail(0, "identity at t = 0", format!("{:?}", self.cumulative[0]));
        }
        let mut alpha_prod = 1.0;
        let mut unmasked_prod = 1.0;
        for t in 1..=self.steps() {
            let p = self.step[t];
            for v in [p.alpha, p.beta, p.gamma] {
                if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                    return fail(t, "per-step values in [0, 1]", format!("{p:?}"));
                }
            }
            if (p.total(self.k) - 1.0).abs() > SCHEDULE_TOL {
                return fail(
                    t,
                    "alpha + K beta + gamma = 1",
                    format!("sum = {}", p.total(self.k)),
                );
            }
            if self.strategy == Strategy::Uniform && p.gamma != 0.0 {
                return fail(t, "uniform strategy has gamma = 0", format!("gamma = {}", p.gamma));
            }
            alpha_prod *= p.alpha;
            unmasked_prod *= 1.0 - p.gamma;
            let c = self.cumulative[t];
            if (c.alpha - alpha_prod).abs() > SCHEDULE_TOL {
                return fail(
                    t,
                    "alpha_bar = prod alpha",
                    format!("{} vs {alpha_prod}", c.alpha),
                );
            }
            if (c.gamma - (1.0 - unmasked_prod)).abs() > SCHEDULE_TOL {
                return fail(
                    t,
                    "gamma_bar = 1 - prod (1 - gamma)",
                    format!("{} vs {}", c.gamma, 1.0 - unmasked_prod),
                );
            }
            if (c.beta - (1.0 - c.alpha - c.gamma) / k).abs() > SCHEDULE_TOL {
                return fail(
                    t,
                    "beta_bar = (1 - alpha_bar - gamma_bar) / K",
                    format!("{} vs {}", c.beta, (1.0 - c.alpha - c.gamma) / k),
                );
            }
            let prev = self.cumulative[t - 1];
            if c.alpha > prev.alpha + SCHEDULE_TOL {
                return fail(t, "alpha_bar non-increasing", format!("{} > {}", c.alpha, prev.alpha));
            }
            if c.gamma + SCHEDULE_TOL < prev.gamma {
                return fail(t, "gamma_bar non-decreasing", format!("{} < {}", c.gamma, prev.gamma));
            }
        }
        Ok(())
    }

    /// Text table: one row per step `t = 1..=T` with columns
    /// `alpha beta gamma alpha_bar beta_bar gamma_bar`.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "# T={} K={} strategy={}\n# alpha beta gamma alpha_bar beta_bar gamma_bar\n",
            self.steps(),
            self.k,
            self.strategy.name()
        );
        for t in 1..=self.steps() {
            let (p, c) = (self.step[t], self.cumulative[t]);
            let _ = writeln!(
                out,
                "{} {} {} {} {} {}",
                p.alpha, p.beta, p.gamma, c.alpha, c.beta, c.gamma
            );
        }
        out
    }
}
