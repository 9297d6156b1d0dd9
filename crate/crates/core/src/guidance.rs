//! Classifier-free guidance over three nested conditionings.
//!
//! The guided estimate composes four forward passes:
//!
//! ```text
//! e(∅,∅,∅) + s_in·(e(in,∅,∅) − e(∅,∅,∅))
//!          + s_sty·(e(in,sty,∅) − e(in,∅,∅))
//!          + s_T·(e(in,sty,T) − e(in,sty,∅))
//! ```
//!
//! Training drops conditionings with the same nesting so all four
//! patterns are in-distribution.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Conditioning, NoiseModel, NullPattern};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, ParamVars, Tensor, Var};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceScales {
    pub s_in: f64,
    pub s_sty: f64,
    pub s_t: f64,
}

impl Default for GuidanceScales {
    fn default() -> Self {
        Self {
            s_in: 1.5,
            s_sty: 3.0,
            s_t: 7.5,
        }
    }
}

impl GuidanceScales {
    pub const UNIT: GuidanceScales = GuidanceScales {
        s_in: 1.0,
        s_sty: 1.0,
        s_t: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("s_in", self.s_in), ("s_sty", self.s_sty), ("s_t", self.s_t)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!("guidance scale {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Records the guided estimate on `graph`. `cond` must have all three
/// conditionings present.
pub fn cfg_estimate_graph<M: NoiseModel + ?Sized>(
    model: &M,
    g: &Graph,
    params: &ParamVars,
    z_t: Var,
    t: usize,
    cond: &Conditioning,
    scales: GuidanceScales,
) -> Result<Var> {
    if cond.pattern()? != NullPattern::Full {
        return Err(Error::Conditioning("guided estimate needs all three conditionings".into()));
    }
    scales.validate()?;
    let e_null = model.forward(g, params, z_t, t, &cond.null_of(NullPattern::AllNull))?;
    let e_in = model.forward(g, params, z_t, t, &cond.null_of(NullPattern::InputOnly))?;
    let e_sty = model.forward(g, params, z_t, t, &cond.null_of(NullPattern::InputStyle))?;
    let e_full = model.forward(g, params, z_t, t, cond)?;
    let mut out = e_null;
    for (hi, lo, s) in [(e_in, e_null, scales.s_in), (e_sty, e_in, scales.s_sty), (e_full, e_sty, scales.s_t)] {
        let delta = g.sub(hi, lo)?;
        out = g.add(out, g.scale(delta, s))?;
    }
    Ok(out)
}

/// Guided noise estimate without keeping a tape.
pub fn cfg_estimate<M: NoiseModel + ?Sized>(
    model: &M,
    params: &ParamStore,
    z_t: &Tensor,
    t: usize,
    cond: &Conditioning,
    scales: GuidanceScales,
) -> Result<Tensor> {
    let g = Graph::new();
    let vars = ParamVars::register(&g, params);
    let z = g.constant(z_t.clone());
    let out = cfg_estimate_graph(model, &g, &vars, z, t, cond, scales)?;
    let v = g.value(out).clone();
    Ok(v)
}

/// Probabilities of dropping to the all-null, input-only and input-style
/// patterns during training; the remainder trains the full pattern.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutProbs(pub [f64; 3]);

impl Default for DropoutProbs {
    fn default() -> Self {
        DropoutProbs([0.05, 0.05, 0.05])
    }
}

impl DropoutProbs {
    pub fn validate(&self) -> Result<()> {
        let p = self.0;
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) || p.iter().sum::<f64>() > 1.0 {
            return Err(Error::InvalidArgument(format!("dropout probabilities {p:?} must be >= 0 with sum <= 1")));
        }
        Ok(())
    }
}

/// Samples a training null pattern.
pub fn dropout_pattern(rng: &mut Rng, probs: DropoutProbs) -> Result<NullPattern> {
    probs.validate()?;
    let u: f64 = rng.random();
    let [a, b, c] = probs.0;
    Ok(if u < a {
        NullPattern::AllNull
    } else if u < a + b {
        NullPattern::InputOnly
    } else if u < a + b + c {
        NullPattern::InputStyle
    } else {
        NullPattern::Full
    })
}
