use crate::group::KeyMaterial;
use crate::masking::{self, MaskedUpdate, OpCounter, RecoveryVector};
use crate::quantizer;

use super::workload::Workload;
use super::{ProtocolError, RoundPlan};

#[derive(Debug, Clone)]
pub struct ClientState {
    pub keys: KeyMaterial,
    pub workload: Workload,
}

impl ClientState {
    pub fn new(keys: KeyMaterial, workload: Workload) -> Self {
        Self { keys, workload }
    }

    pub fn id(&self) -> u64 {
        self.keys.client_id()
    }

    pub fn local_model(&self, plan: &RoundPlan) -> Vec<f64> {
        self.workload
            .local_model(self.id(), plan.round, &plan.global_model)
    }
}

/// Integer encoding of a local model before masking: `floor(w * L)` wrapped
/// into `Z_{2^32}` in scaling mode, or the capped quantized difference
/// `w - w^{t-1}` wrapped into `Z_{2^r}`.
pub(crate) fn encode_local(
    plan: &RoundPlan,
    group: usize,
    local: &[f64],
) -> Result<Vec<u64>, ProtocolError> {
    if local.len() != plan.dim() {
        return Err(ProtocolError::Protocol(format!(
            "local model has dimension {}, expected {}",
            local.len(),
            plan.dim()
        )));
    }
    match plan.group_quantizer(group)? {
        None => local
            .iter()
            .map(|&w| Ok(quantizer::wrap(quantizer::scale_to_int(w, plan.scale)?, 32)))
            .collect(),
        Some(cfg) => local
            .iter()
            .zip(&plan.global_model)
            .map(|(&w, &g)| {
                let q = quantizer::quantize_contribution(w - g, &cfg)?;
                Ok(quantizer::wrap(q, cfg.bits()))
            })
            .collect(),
    }
}

fn own_group(state: &ClientState, plan: &RoundPlan) -> Result<usize, ProtocolError> {
    plan.group_of(state.id()).ok_or_else(|| {
        ProtocolError::Usage(format!(
            "client {} is not selected for round {}",
            state.id(),
            plan.round
        ))
    })
}

/// Trains locally, encodes, and masks against the client's own group.
pub fn client_update(
    state: &ClientState,
    plan: &RoundPlan,
    ops: &OpCounter,
) -> Result<MaskedUpdate, ProtocolError> {
    let group = own_group(state, plan)?;
    let local = state.local_model(plan);
    let plain = encode_local(plan, group, &local)?;
    let params = plan.group_params(group)?;
    Ok(masking::mask_update_counted(
        &plain,
        &state.keys,
        &params,
        ops,
    )?)
}

/// Recovery vector for the dropouts inside the client's group.
pub fn client_recovery(
    state: &ClientState,
    plan: &RoundPlan,
    dropouts: &[u64],
    ops: &OpCounter,
) -> Result<RecoveryVector, ProtocolError> {
    let group = own_group(state, plan)?;
    let params = plan.group_params(group)?;
    Ok(masking::recovery_vector_counted(
        &state.keys,
        dropouts,
        &params,
        ops,
    )?)
}
