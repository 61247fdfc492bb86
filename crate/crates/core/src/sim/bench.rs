//! Operation counts and message sizes measured on real protocol runs.

use crate::group::{gen_keypair, GroupParams};
use crate::masking::OpCounter;
use crate::protocol::workload::{SyntheticUpdates, Workload};
use crate::protocol::{
    client_recovery, client_update, make_groups, server_round, ClientPool, ClientState, Mode,
    RoundPlan,
};

use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CountCase {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub group_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientCounts {
    pub id: u64,
    pub group_len: usize,
    pub group_dropouts: usize,
    pub mask_hashes: u64,
    pub recovery_hashes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountRow {
    pub case: CountCase,
    /// Online clients only.
    pub clients: Vec<ClientCounts>,
    pub server_additions: u64,
}

fn bench_pool(n: usize) -> Result<ClientPool, SimError> {
    let params = GroupParams::test_grade();
    let clients = (1..=n as u64)
        .map(|id| {
            let keys =
                gen_keypair(&params, id, b"bench").map_err(crate::protocol::ProtocolError::from)?;
            let workload = Workload::Synthetic(SyntheticUpdates {
                seed: b"bench".to_vec(),
                spread: 0.5,
            });
            Ok(ClientState::new(keys, workload))
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    Ok(ClientPool::setup(params, clients)?)
}

fn bench_plan(selected: Vec<u64>, group_size: Option<usize>, mode: Mode, m: usize) -> RoundPlan {
    RoundPlan {
        round: 1,
        groups: make_groups(&selected, group_size),
        selected,
        global_model: vec![0.0; m],
        mode,
        scale: 1e7,
        clip_bound: 0.5,
    }
}

/// One round per case with the last `d` clients dropping, counting hashes
/// per online client and additions at the server.
pub fn bench_counts(cases: &[CountCase]) -> Result<Vec<CountRow>, SimError> {
    let mut rows = Vec::with_capacity(cases.len());
    for &case in cases {
        if case.d >= case.n || case.m == 0 {
            return Err(SimError::Config(vec![format!(
                "bench case needs d < n and m >= 1, got n={} d={} m={}",
                case.n, case.d, case.m
            )]));
        }
        let pool = bench_pool(case.n)?;
        let plan = bench_plan(pool.ids(), case.group_size, Mode::Scaling, case.m);
        let dropped: Vec<u64> = (case.n - case.d + 1..=case.n).map(|i| i as u64).collect();

        let mut updates = Vec::new();
        let mut recoveries = Vec::new();
        let mut clients = Vec::new();
        for group in &plan.groups {
            let d: Vec<u64> = group
                .iter()
                .copied()
                .filter(|id| dropped.contains(id))
                .collect();
            for &id in group.iter().filter(|id| !dropped.contains(id)) {
                let state = pool.get(id).expect("pool member");
                let mask_ops = OpCounter::new();
                updates.push(client_update(state, &plan, &mask_ops)?);
                let rec_ops = OpCounter::new();
                if !d.is_empty() {
                    recoveries.push(client_recovery(state, &plan, &d, &rec_ops)?);
                }
                clients.push(ClientCounts {
                    id,
                    group_len: group.len(),
                    group_dropouts: d.len(),
                    mask_hashes: mask_ops.hashes(),
                    recovery_hashes: rec_ops.hashes(),
                });
            }
        }
        let outcome = server_round(&plan, &updates, &recoveries)?;
        rows.push(CountRow {
            case,
            clients,
            server_additions: outcome.metrics.server_additions,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ByteRow {
    pub mode: Mode,
    /// Packed value bytes of one masked update.
    pub payload_bytes: usize,
    /// Payload plus the fixed header.
    pub wire_bytes: usize,
}

/// Serialized size of one masked update of dimension `m` in each mode.
pub fn bench_bytes(m: usize) -> Result<Vec<ByteRow>, SimError> {
    let pool = bench_pool(2)?;
    [Mode::Scaling, Mode::Quant16, Mode::Quant8]
        .into_iter()
        .map(|mode| {
            let plan = bench_plan(pool.ids(), None, mode, m);
            let update = client_update(pool.get(1).expect("client 1"), &plan, &OpCounter::new())?;
            Ok(ByteRow {
                mode,
                payload_bytes: update.payload_len(),
                wire_bytes: update.to_wire().len(),
            })
        })
        .collect()
}
