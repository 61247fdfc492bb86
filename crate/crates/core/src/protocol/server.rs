use std::collections::BTreeSet;

use crate::codec::{Reader, Writer};
use crate::masking::{self, MaskedUpdate, OpCounter, RecoveryVector};
use crate::quantizer;

use super::{ProtocolError, RoundPlan};

/// Server-side counters for one round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RoundMetrics {
    /// Modular additions spent summing masked updates.
    pub server_additions: u64,
    /// Wire bytes of all masked updates received.
    pub update_bytes: u64,
    /// Wire bytes of all recovery vectors received.
    pub recovery_bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub round: u64,
    pub responders: Vec<u64>,
    pub dropouts: Vec<u64>,
    /// Indices of groups with no responders; they contribute nothing.
    pub skipped_groups: Vec<u64>,
    /// Averaging denominator: the number of responders.
    pub denominator: u64,
    /// Decoded sum over responders: the sum of local models in scaling mode,
    /// the sum of de-quantized differences in quantized mode.
    pub aggregate: Vec<f64>,
    pub global_model: Vec<f64>,
    pub metrics: RoundMetrics,
}

/// Recovered sum mod `M` of group `index`, or `None` when nobody in the
/// group responded. Touches only that group's updates and recovery vectors.
pub fn group_aggregate(
    plan: &RoundPlan,
    index: usize,
    received: &[MaskedUpdate],
    recoveries: &[RecoveryVector],
    ops: &OpCounter,
) -> Result<Option<Vec<u64>>, ProtocolError> {
    let params = plan.group_params(index)?;
    let members = &plan.groups[index];
    let updates: Vec<MaskedUpdate> = received
        .iter()
        .filter(|u| members.binary_search(&u.client_id).is_ok())
        .cloned()
        .collect();
    let group_recoveries: Vec<RecoveryVector> = recoveries
        .iter()
        .filter(|q| members.binary_search(&q.client_id).is_ok())
        .cloned()
        .collect();
    if updates.is_empty() {
        if !group_recoveries.is_empty() {
            return Err(ProtocolError::Protocol(format!(
                "group {index} has recovery vectors but no updates"
            )));
        }
        return Ok(None);
    }
    let partial = masking::aggregate(&updates, &params, ops)?;
    let responded: BTreeSet<u64> = updates.iter().map(|u| u.client_id).collect();
    let dropped: Vec<u64> = members
        .iter()
        .copied()
        .filter(|id| !responded.contains(id))
        .collect();
    if dropped.is_empty() {
        if !group_recoveries.is_empty() {
            return Err(ProtocolError::Protocol(format!(
                "group {index} had no dropouts but received recovery vectors"
            )));
        }
        return Ok(Some(partial));
    }
    if let Some(q) = group_recoveries.iter().find(|q| q.dropout_set != dropped) {
        return Err(ProtocolError::Protocol(format!(
            "client {} recovered for {:?}, but the dropouts are {:?}",
            q.client_id, q.dropout_set, dropped
        )));
    }
    Ok(Some(masking::apply_recovery(
        &partial,
        &group_recoveries,
        &params,
    )?))
}

/// Per-group aggregation and recovery, decoding, and averaging over the
/// responders.
pub fn server_round(
    plan: &RoundPlan,
    received: &[MaskedUpdate],
    recoveries: &[RecoveryVector],
) -> Result<RoundOutcome, ProtocolError> {
    plan.validate()?;
    let ops = OpCounter::new();
    let mut responders = BTreeSet::new();
    for u in received {
        if plan.group_of(u.client_id).is_none() {
            return Err(ProtocolError::Protocol(format!(
                "update from unselected client {}",
                u.client_id
            )));
        }
        if !responders.insert(u.client_id) {
            return Err(ProtocolError::Protocol(format!(
                "duplicate update from client {}",
                u.client_id
            )));
        }
    }
    if let Some(q) = recoveries
        .iter()
        .find(|q| !responders.contains(&q.client_id))
    {
        return Err(ProtocolError::Protocol(format!(
            "recovery vector from non-responding client {}",
            q.client_id
        )));
    }

    let dim = plan.dim();
    let mut skipped_groups = Vec::new();
    let mut scaled_sum = vec![0i64; dim];
    let mut real_sum = vec![0.0f64; dim];
    for index in 0..plan.groups.len() {
        let Some(sum) = group_aggregate(plan, index, received, recoveries, &ops)? else {
            skipped_groups.push(index as u64);
            continue;
        };
        match plan.group_quantizer(index)? {
            None => {
                for (acc, &v) in scaled_sum.iter_mut().zip(&sum) {
                    *acc += quantizer::recover_sign(v, 32);
                }
            }
            Some(cfg) => {
                for (acc, &v) in real_sum.iter_mut().zip(&sum) {
                    *acc += quantizer::dequantize(quantizer::recover_sign(v, cfg.bits()), &cfg);
                }
            }
        }
    }

    let denominator = responders.len() as u64;
    let aggregate: Vec<f64> = if plan.mode.quant_bits().is_some() {
        real_sum
    } else {
        scaled_sum
            .iter()
            .map(|&s| quantizer::descale(s, plan.scale))
            .collect()
    };
    let global_model = if denominator == 0 {
        plan.global_model.clone()
    } else if plan.mode.quant_bits().is_some() {
        plan.global_model
            .iter()
            .zip(&aggregate)
            .map(|(w, s)| w + s / denominator as f64)
            .collect()
    } else {
        aggregate.iter().map(|s| s / denominator as f64).collect()
    };

    let dropouts = plan
        .selected
        .iter()
        .copied()
        .filter(|id| !responders.contains(id))
        .collect();
    let metrics = RoundMetrics {
        server_additions: ops.additions(),
        update_bytes: received.iter().map(|u| u.to_wire().len() as u64).sum(),
        recovery_bytes: recoveries.iter().map(|q| q.to_wire().len() as u64).sum(),
    };
    Ok(RoundOutcome {
        round: plan.round,
        responders: responders.into_iter().collect(),
        dropouts,
        skipped_groups,
        denominator,
        aggregate,
        global_model,
        metrics,
    })
}

impl RoundOutcome {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.round)
            .u64_list(&self.responders)
            .u64_list(&self.dropouts)
            .u64_list(&self.skipped_groups)
            .u64(self.denominator)
            .f64_list(&self.aggregate)
            .f64_list(&self.global_model)
            .u64(self.metrics.server_additions)
            .u64(self.metrics.update_bytes)
            .u64(self.metrics.recovery_bytes);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let mut r = Reader::new(bytes);
        let out = Self::read(&mut r)?;
        r.finish()?;
        Ok(out)
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self, ProtocolError> {
        Ok(Self {
            round: r.u64()?,
            responders: r.u64_list()?,
            dropouts: r.u64_list()?,
            skipped_groups: r.u64_list()?,
            denominator: r.u64()?,
            aggregate: r.f64_list()?,
            global_model: r.f64_list()?,
            metrics: RoundMetrics {
                server_additions: r.u64()?,
                update_bytes: r.u64()?,
                recovery_bytes: r.u64()?,
            },
        })
    }
}
