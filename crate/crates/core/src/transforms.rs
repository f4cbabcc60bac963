//! Translation and amplitude-scaling actions on windows.

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::SeriesWindow;
use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    Identity,
    Translation,
    Scaling,
}

impl std::fmt::Display for ActionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ActionKind::Identity => "identity",
            ActionKind::Translation => "translation",
            ActionKind::Scaling => "scaling",
        })
    }
}

/// A one-parameter action `g_p` with `p ~ U([a, b])`, optionally drawn per channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawAction", into = "RawAction")]
pub struct GroupAction {
    kind: ActionKind,
    a: f64,
    b: f64,
    per_channel: bool,
}

#[derive(Serialize, Deserialize)]
struct RawAction {
    kind: ActionKind,
    #[serde(default)]
    a: f64,
    #[serde(default)]
    b: f64,
    #[serde(default)]
    per_channel: bool,
}

impl TryFrom<RawAction> for GroupAction {
    type Error = Error;
    fn try_from(r: RawAction) -> Result<Self> {
        GroupAction::new(r.kind, r.a, r.b, r.per_channel)
    }
}

impl From<GroupAction> for RawAction {
    fn from(g: GroupAction) -> Self {
        RawAction {
            kind: g.kind,
            a: g.a,
            b: g.b,
            per_channel: g.per_channel,
        }
    }
}

impl GroupAction {
    pub fn new(kind: ActionKind, a: f64, b: f64, per_channel: bool) -> Result<Self> {
        if kind != ActionKind::Identity {
            ensure!(
                a.is_finite() && b.is_finite() && a < b,
                InvalidArgument,
                "action interval [{a}, {b}] must satisfy a < b"
            );
        }
        if kind == ActionKind::Scaling {
            ensure!(a > 0.0, InvalidArgument, "scaling interval must be positive");
        }
        Ok(Self {
            kind,
            a,
            b,
            per_channel,
        })
    }

    pub fn identity() -> Self {
        Self {
            kind: ActionKind::Identity,
            a: 0.0,
            b: 0.0,
            per_channel: false,
        }
    }

    pub fn translation(a: f64, b: f64, per_channel: bool) -> Result<Self> {
        Self::new(ActionKind::Translation, a, b, per_channel)
    }

    pub fn scaling(a: f64, b: f64, per_channel: bool) -> Result<Self> {
        Self::new(ActionKind::Scaling, a, b, per_channel)
    }

    /// Default action for `d`-channel data: translation in (-0.3, 0.3) or (-0.5, 0.5),
    /// scaling in (0.9, 1.1) or (0.3, 1.7), per channel when `d > 1`.
    pub fn default_for(kind: ActionKind, d: usize) -> Self {
        let multi = d > 1;
        let (a, b) = match (kind, multi) {
            (ActionKind::Identity, _) => (0.0, 0.0),
            (ActionKind::Translation, false) => (-0.3, 0.3),
            (ActionKind::Translation, true) => (-0.5, 0.5),
            (ActionKind::Scaling, false) => (0.9, 1.1),
            (ActionKind::Scaling, true) => (0.3, 1.7),
        };
        Self::new(kind, a, b, multi).expect("default intervals are valid")
    }

    pub fn kind(&self) -> ActionKind {
        self.kind
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.a, self.b)
    }

    pub fn per_channel(&self) -> bool {
        self.per_channel
    }

    /// Parameter value that leaves every window unchanged.
    pub fn neutral(&self) -> f64 {
        match self.kind {
            ActionKind::Scaling => 1.0,
            _ => 0.0,
        }
    }

    pub fn param_len(&self, d: usize) -> usize {
        match (self.kind, self.per_channel) {
            (ActionKind::Identity, _) => 0,
            (_, true) => d,
            (_, false) => 1,
        }
    }

    pub fn sample_params<R: Rng + ?Sized>(&self, d: usize, rng: &mut R) -> ActionParams {
        let n = self.param_len(d);
        let values = (0..n).map(|_| rng.random_range(self.a..=self.b)).collect();
        ActionParams { values }
    }

    fn channel_param(&self, params: &ActionParams, c: usize) -> f64 {
        if params.values.len() == 1 {
            params.values[0]
        } else {
            params.values[c]
        }
    }

    fn check_params(&self, params: &ActionParams, d: usize) -> Result<()> {
        let n = params.values.len();
        let ok = match self.kind {
            ActionKind::Identity => true,
            _ => n == 1 || n == d,
        };
        ensure!(
            ok,
            Shape,
            "{} parameters do not fit a {d}-channel window",
            n
        );
        Ok(())
    }

    pub fn apply(&self, params: &ActionParams, x: &SeriesWindow) -> Result<SeriesWindow> {
        self.check_params(params, x.d)?;
        let mut out = x.clone();
        if self.kind == ActionKind::Identity {
            return Ok(out);
        }
        for c in 0..x.d {
            let p = self.channel_param(params, c);
            for v in out.channel_mut(c) {
                match self.kind {
                    ActionKind::Translation => *v += p,
                    ActionKind::Scaling => *v *= p,
                    ActionKind::Identity => unreachable!(),
                }
            }
        }
        Ok(out)
    }

    /// Applies per-element parameters to a `(batch, d, m)` tensor. `params` is
    /// `(batch, 1)` or `(batch, d)`.
    pub fn apply_tensor(&self, params: &Tensor, x: &Tensor) -> Result<Tensor> {
        if self.kind == ActionKind::Identity {
            return Ok(x.clone());
        }
        let (b, d, _) = x.dims3()?;
        let (pb, pn) = params.dims2()?;
        ensure!(
            pb == b && (pn == 1 || pn == d),
            Shape,
            "parameter tensor ({pb}, {pn}) does not fit batch ({b}, {d}, _)"
        );
        let p = params.to_dtype(x.dtype())?.reshape((b, pn, 1))?;
        Ok(match self.kind {
            ActionKind::Translation => x.broadcast_add(&p)?,
            ActionKind::Scaling => x.broadcast_mul(&p)?,
            ActionKind::Identity => unreachable!(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionParams {
    pub values: Vec<f64>,
}

impl ActionParams {
    pub fn shared(p: f64) -> Self {
        Self { values: vec![p] }
    }
}
