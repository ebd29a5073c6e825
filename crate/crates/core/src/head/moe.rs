//! Per-position mixture of experts.

use super::config::{HeadConfig, LEVELS};
use super::layers::{add_linear, from_tokens, linear, to_tokens};
use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::params::{Init, ParamStore};

pub(crate) fn init(init: &mut Init, store: &mut ParamStore, cfg: &HeadConfig) {
    for k in 0..LEVELS {
        let c = cfg.channels[k];
        let hidden = cfg.moe_hidden(k);
        add_linear(init, store, &format!("moe.{k}.gate"), c, cfg.experts, 1.0);
        for j in 0..cfg.experts {
            add_linear(init, store, &format!("moe.{k}.expert{j}.hidden"), c, hidden, 2f64.sqrt());
            add_linear(init, store, &format!("moe.{k}.expert{j}.out"), hidden, c, 1.0);
        }
    }
}

pub struct MoeOutput {
    pub out: NodeId,
    /// Gate weights, `[H·W, N_e]`.
    pub gate: NodeId,
}

pub fn forward(g: &mut Graph, store: &ParamStore, cfg: &HeadConfig, level: usize, x: NodeId) -> Result<MoeOutput> {
    let (_, h, w) = g.value(x).dims3()?;
    let tokens = to_tokens(g, x)?;
    let logits = linear(g, store, &format!("moe.{level}.gate"), tokens)?;
    let gate = g.softmax(logits)?;
    let mut experts = Vec::with_capacity(cfg.experts);
    for j in 0..cfg.experts {
        let hdn = linear(g, store, &format!("moe.{level}.expert{j}.hidden"), tokens)?;
        let hdn = g.gelu(hdn)?;
        experts.push(linear(g, store, &format!("moe.{level}.expert{j}.out"), hdn)?);
    }
    let mixed = g.mix_experts(gate, &experts)?;
    Ok(MoeOutput {
        out: from_tokens(g, mixed, h, w)?,
        gate,
    })
}
