use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::ParamSet;
use crate::tensor::{cast, Real, Tensor};

use super::network::{bridge_features, encode_full};
use super::{names, ModelConfig, ModelParams};

/// Exponential-moving-average shadow of the image encoder and bridge.
#[derive(Clone, Debug)]
pub struct MomentumParams<T: Real> {
    pub params: ParamSet<T>,
    pub decay: f64,
}

fn tracked_prefixes() -> [&'static str; 2] {
    [names::ENCODER, names::BRIDGE]
}

impl<T: Real> MomentumParams<T> {
    /// Independent copy of the online encoder and bridge parameters.
    pub fn from_online(online: &ModelParams<T>, decay: f64) -> Self {
        MomentumParams {
            params: online.params.subset(&tracked_prefixes()).deep_clone(),
            decay,
        }
    }
}

/// Bridge-space targets for full images (`B*N x d_bridge`) computed with the
/// shadow parameters. The result is a plain tensor with no gradient lineage.
pub fn momentum_target<T: Real>(
    momentum: &MomentumParams<T>,
    cfg: &ModelConfig,
    patches: &Tensor<T>,
) -> Result<Tensor<T>> {
    if momentum.params.is_empty() {
        return Err(Error::invalid("momentum encoder is not initialised"));
    }
    let mut g = Graph::new();
    let bound = g.bind(&momentum.params, false);
    let x = g.constant(patches.clone());
    let enc = encode_full(&mut g, &bound, cfg, x)?;
    let out = bridge_features(&mut g, &bound, cfg, enc)?;
    Ok(g.value(out).clone())
}

/// `shadow <- m * shadow + (1 - m) * online` over the encoder and bridge.
pub fn ema_update<T: Real>(momentum: &mut MomentumParams<T>, online: &ModelParams<T>, decay: f64) -> Result<()> {
    let online_tracked = online.params.subset(&tracked_prefixes());
    for name in online_tracked.names() {
        if !momentum.params.contains(name) {
            return Err(Error::KeyMismatch(format!("momentum encoder lacks `{name}`")));
        }
    }
    let m: T = cast(decay);
    let one_minus: T = cast(1.0 - decay);
    for (name, shadow) in momentum.params.iter_mut() {
        let src = online_tracked
            .get(name)
            .ok_or_else(|| Error::KeyMismatch(format!("online model lacks `{name}`")))?;
        if src.shape() != shadow.shape() {
            return Err(Error::ShapeMismatch {
                op: "ema_update",
                lhs: shadow.shape().to_vec(),
                rhs: src.shape().to_vec(),
            });
        }
        for (s, o) in shadow.data_mut().iter_mut().zip(src.data()) {
            *s = m * *s + one_minus * *o;
        }
    }
    momentum.decay = decay;
    Ok(())
}
