//! Partition planning and trusted-memory estimation.
//!
//! A boundary `l` runs layers `1..=l` in the rich world and `l+1..=L` in
//! the trusted world. Planning applies the grouping rule (a non-trainable
//! layer is computed on its preceding trainable layer, so protecting it
//! means pulling that trainable layer in too), estimates the trusted-side
//! memory footprint, and checks it against the secure budget.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::net::Network;

pub const MIB: u64 = 1024 * 1024;

/// Modeled trusted-runtime overhead (code, stack, heap bookkeeping)
/// counted inside the TA's available memory.
pub const FIXED_RUNTIME_BYTES: u64 = MIB;

/// Secure-memory budget model. `total` is the secure memory carved out of
/// RAM; `reserve` belongs to the TEE runtime outside the TA; what remains
/// is available to the TA. The shared buffer bounds one message chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SecureBudget {
    pub total_bytes: u64,
    pub reserve_bytes: u64,
    pub shared_buffer_bytes: u64,
}

impl Default for SecureBudget {
    fn default() -> Self {
        SecureBudget {
            total_bytes: 16 * MIB,
            reserve_bytes: 2 * MIB,
            shared_buffer_bytes: 2 * MIB,
        }
    }
}

impl SecureBudget {
    /// Budget with a given TA-available size and default reserve/buffer.
    pub fn with_available(available: u64) -> Self {
        SecureBudget {
            total_bytes: available + 2 * MIB,
            reserve_bytes: 2 * MIB,
            shared_buffer_bytes: 2 * MIB,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reserve_bytes >= self.total_bytes {
            return Err(Error::validation(
                "budget reserve must be smaller than total secure memory",
            ));
        }
        if self.shared_buffer_bytes == 0 {
            return Err(Error::validation("shared buffer must be positive"));
        }
        Ok(())
    }

    /// Bytes available to the trusted application.
    pub fn ta_available(&self) -> u64 {
        self.total_bytes - self.reserve_bytes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    Infer,
    Train,
}

/// A validated partition choice.
#[derive(Debug, Clone, Serialize)]
pub struct PartitionPlan {
    /// Boundary as requested.
    pub requested_boundary: usize,
    /// Boundary after the grouping rule; this is what executes.
    pub effective_boundary: usize,
    pub layer_count: usize,
    pub mode: PlanMode,
    pub estimated_ta_bytes: u64,
    pub budget_bytes: u64,
    pub valid: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl PartitionPlan {
    pub fn trusted_layer_count(&self) -> usize {
        self.layer_count - self.effective_boundary
    }
}

/// Per-layer byte terms of the estimate formula.
fn layer_bytes(net: &Network, index: usize, mode: PlanMode) -> u64 {
    let layer = net.layer(index).expect("index in range");
    let params = 4 * layer.param_count() as u64;
    let acts = 4 * layer.output_shape().count() as u64;
    let grads = match mode {
        PlanMode::Infer => 0,
        PlanMode::Train => params + acts,
    };
    params + acts + grads
}

/// Estimate the trusted-side memory for boundary `l`:
/// fixed runtime + per-trusted-layer parameter/activation(/gradient) bytes
/// + the chunk-reassembly buffer for the inbound boundary activation.
pub fn estimate_ta_memory(net: &Network, effective_boundary: usize, mode: PlanMode) -> Result<u64> {
    let l = net.layer_count();
    if effective_boundary > l {
        return Err(Error::contract(format!(
            "boundary {effective_boundary} out of range 0..={l}"
        )));
    }
    let mut bytes = FIXED_RUNTIME_BYTES;
    if effective_boundary == l {
        return Ok(bytes);
    }
    for idx in (effective_boundary + 1)..=l {
        bytes += layer_bytes(net, idx, mode);
    }
    let inbound = if effective_boundary == 0 {
        net.input_shape().count()
    } else {
        net.layer(effective_boundary)?.output_shape().count()
    };
    bytes += 4 * inbound as u64;
    Ok(bytes)
}

/// Apply the grouping rule: while the first trusted layer is non-trainable
/// and anything precedes it, move the boundary earlier.
pub fn effective_boundary(net: &Network, requested: usize) -> usize {
    let mut eff = requested;
    let l = net.layer_count();
    while eff > 0 && eff < l && !net.layer(eff + 1).expect("in range").is_trainable() {
        eff -= 1;
    }
    eff
}

/// Plan a partition at `requested` under `budget`. Never mutates the net;
/// infeasible plans come back with `valid = false` and a reason.
pub fn plan_partition(
    net: &Network,
    requested: usize,
    budget: &SecureBudget,
    mode: PlanMode,
) -> Result<PartitionPlan> {
    let l = net.layer_count();
    if requested > l {
        return Err(Error::contract(format!(
            "requested boundary {requested} out of range 0..={l}"
        )));
    }
    budget.validate()?;
    let effective = effective_boundary(net, requested);
    let estimated = estimate_ta_memory(net, effective, mode)?;
    let available = budget.ta_available();
    let (valid, reason) = if estimated <= available {
        (true, None)
    } else {
        (
            false,
            Some(format!(
                "estimated {estimated} bytes exceeds trusted budget {available} bytes by {} bytes",
                estimated - available
            )),
        )
    };
    Ok(PartitionPlan {
        requested_boundary: requested,
        effective_boundary: effective,
        layer_count: l,
        mode,
        estimated_ta_bytes: estimated,
        budget_bytes: available,
        valid,
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfg::parse_cfg;

    fn five_layer_net() -> Network {
        // conv, maxpool, connected, softmax, cost
        parse_cfg(
            "[net]\nheight=8\nwidth=8\nchannels=1\nclasses=4\n\
             [convolutional]\nfilters=2\nsize=3\npad=1\nactivation=relu\n\
             [maxpool]\nsize=2\nstride=2\n\
             [connected]\noutput=4\n[softmax]\n[cost]\n",
        )
        .unwrap()
    }

    #[test]
    fn grouping_pulls_trainable_layer_in() {
        let net = five_layer_net();
        // request: only {softmax, cost} trusted -> fc (layer 3) pulled in
        assert_eq!(effective_boundary(&net, 3), 2);
        // request: only {cost} trusted -> walks back through softmax to fc
        assert_eq!(effective_boundary(&net, 4), 2);
        // request: {maxpool, ...} trusted -> walks back to the conv layer
        assert_eq!(effective_boundary(&net, 1), 0);
        // trainable first trusted layer stays put
        assert_eq!(effective_boundary(&net, 2), 2);
        assert_eq!(effective_boundary(&net, 0), 0);
        // l == L: nothing trusted, nothing to group
        assert_eq!(effective_boundary(&net, 5), 5);
    }

    #[test]
    fn empty_trusted_set_estimates_fixed_runtime_only() {
        let net = five_layer_net();
        let est = estimate_ta_memory(&net, 5, PlanMode::Infer).unwrap();
        assert_eq!(est, FIXED_RUNTIME_BYTES);
    }

    #[test]
    fn doubling_fc_units_doubles_its_parameter_term() {
        let a = parse_cfg(
            "[net]\nheight=4\nwidth=4\nchannels=1\nclasses=8\n\
             [connected]\noutput=8\n[softmax]\n[cost]\n",
        )
        .unwrap();
        let b = parse_cfg(
            "[net]\nheight=4\nwidth=4\nchannels=1\nclasses=16\n\
             [connected]\noutput=16\n[softmax]\n[cost]\n",
        )
        .unwrap();
        let pa = 4 * a.layer(1).unwrap().param_count() as u64;
        let pb = 4 * b.layer(1).unwrap().param_count() as u64;
        assert_eq!(pb, 2 * pa);
    }

    #[test]
    fn estimate_matches_hand_formula_and_budget_decides_validity() {
        let net = five_layer_net();
        // trusted = {connected, softmax, cost}: fc weights 4*32 + biases 4
        let fc_params = 4 * (32 * 4 + 4) as u64;
        let acts = 4 * (4 + 4 + 4) as u64; // fc, softmax, cost outputs
        let grads = fc_params + 4 * 4; // fc params + fc output delta
        let sm_ct_grads = 4 * 4 + 4 * 4; // delta caches of softmax, cost
        let inbound = 4 * (4 * 4 * 2) as u64; // maxpool output 4x4x2
        let expected =
            FIXED_RUNTIME_BYTES + fc_params + acts + grads + sm_ct_grads + inbound;
        let est = estimate_ta_memory(&net, 2, PlanMode::Train).unwrap();
        assert_eq!(est, expected);

        // A 1 MiB budget cannot even hold the fixed runtime plus that.
        let tiny = SecureBudget::with_available(MIB);
        let plan = plan_partition(&net, 2, &tiny, PlanMode::Train).unwrap();
        assert!(!plan.valid);
        assert!(plan.reason.as_ref().unwrap().contains("exceeds"));

        let roomy = SecureBudget::default();
        let plan = plan_partition(&net, 2, &roomy, PlanMode::Train).unwrap();
        assert!(plan.valid);
        assert!(plan.reason.is_none());
    }

    #[test]
    fn thousand_class_output_layer_needs_about_4mib() {
        // 1024 inputs x 1000 classes, float32.
        let net = parse_cfg(
            "[net]\nheight=32\nwidth=32\nchannels=1\nclasses=1000\n\
             [connected]\noutput=1000\n[softmax]\n[cost]\n",
        )
        .unwrap();
        let fc = net.layer(1).unwrap();
        let param_bytes = 4 * fc.param_count() as u64;
        assert_eq!(param_bytes, 4 * (1024 * 1000 + 1000));
        let four_mib = 4.0 * MIB as f64;
        assert!((param_bytes as f64 - four_mib).abs() / four_mib < 0.05);

        let plan5 = plan_partition(
            &net,
            0,
            &SecureBudget::with_available(5 * MIB),
            PlanMode::Infer,
        )
        .unwrap();
        assert!(plan5.valid, "estimate {}", plan5.estimated_ta_bytes);
        let plan3 = plan_partition(
            &net,
            0,
            &SecureBudget::with_available(3 * MIB),
            PlanMode::Infer,
        )
        .unwrap();
        assert!(!plan3.valid);
    }

    #[test]
    fn out_of_range_boundary_is_contract_violation() {
        let net = five_layer_net();
        assert!(plan_partition(&net, 6, &SecureBudget::default(), PlanMode::Infer).is_err());
    }
}
