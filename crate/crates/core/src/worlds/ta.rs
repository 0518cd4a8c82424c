//! The trusted world: sealed-model custody, budgeted execution of the
//! suffix layers, and the command handler behind the message channel.
//!
//! Trusted layer parameters never leave this module in any reply except
//! `SaveSealed`, which re-encrypts them. Replies carry only sanitized
//! outputs, boundary deltas, trusted-side stats, or errors.

use std::io::{Read, Write};
use std::time::Instant;

use crate::error::{Error, ErrorCategory, Result};
use crate::layer::Mode;
use crate::net::{cross_entropy_delta, cross_entropy_loss, Network};
use crate::privacy::{sanitize, OutputPolicy, SanitizedOutput};
use crate::seal::{seal_suffix_only, SealedContainer, KEY_LEN};
use crate::worlds::plan::{SecureBudget, FIXED_RUNTIME_BYTES};
use crate::worlds::wire::{read_message, write_message, WorldMessage};

/// Byte accounting for everything resident in trusted memory. Any
/// allocation that would exceed the available budget fails and leaves the
/// ledger unchanged.
#[derive(Debug, Clone)]
pub struct MemoryLedger {
    available: u64,
    fixed: u64,
    parameters: u64,
    activations: u64,
    gradients: u64,
    buffers: u64,
    high_water: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LedgerCategory {
    FixedRuntime,
    Parameters,
    Activations,
    Gradients,
    Buffers,
}

impl MemoryLedger {
    pub fn new(available: u64) -> Self {
        MemoryLedger {
            available,
            fixed: 0,
            parameters: 0,
            activations: 0,
            gradients: 0,
            buffers: 0,
            high_water: 0,
        }
    }

    fn slot(&mut self, cat: LedgerCategory) -> &mut u64 {
        match cat {
            LedgerCategory::FixedRuntime => &mut self.fixed,
            LedgerCategory::Parameters => &mut self.parameters,
            LedgerCategory::Activations => &mut self.activations,
            LedgerCategory::Gradients => &mut self.gradients,
            LedgerCategory::Buffers => &mut self.buffers,
        }
    }

    pub fn total(&self) -> u64 {
        self.fixed + self.parameters + self.activations + self.gradients + self.buffers
    }

    pub fn high_water(&self) -> u64 {
        self.high_water
    }

    pub fn available(&self) -> u64 {
        self.available
    }

    pub fn alloc(&mut self, cat: LedgerCategory, bytes: u64) -> Result<()> {
        let total = self.total();
        if total + bytes > self.available {
            return Err(Error::OutOfSecureMemory {
                requested: bytes,
                available: self.available - total,
            });
        }
        *self.slot(cat) += bytes;
        self.high_water = self.high_water.max(self.total());
        Ok(())
    }

    pub fn free(&mut self, cat: LedgerCategory, bytes: u64) {
        let slot = self.slot(cat);
        debug_assert!(*slot >= bytes, "freeing more than allocated");
        *slot = slot.saturating_sub(bytes);
    }

    /// Swap the current reservation of a category for a new size.
    pub fn replace(&mut self, cat: LedgerCategory, bytes: u64) -> Result<()> {
        let current = *self.slot(cat);
        let others = self.total() - current;
        if others + bytes > self.available {
            return Err(Error::OutOfSecureMemory {
                requested: bytes,
                available: self.available - self.total(),
            });
        }
        *self.slot(cat) = bytes;
        self.high_water = self.high_water.max(self.total());
        Ok(())
    }

    pub fn zero(&mut self) {
        self.fixed = 0;
        self.parameters = 0;
        self.activations = 0;
        self.gradients = 0;
        self.buffers = 0;
    }
}

struct LoadedModel {
    /// Suffix fragment `l+1..=L` with unsealed parameters.
    net: Network,
    boundary: usize,
    param_bytes: u64,
    forward_mode: Option<Mode>,
    pending_grads: Option<Vec<(usize, crate::layer::LayerGrads)>>,
}

/// Trusted-side state: unsealed suffix layers, key handle, memory ledger,
/// and the locked output policy.
pub struct TrustedWorld {
    key: Option<[u8; KEY_LEN]>,
    budget: SecureBudget,
    ledger: MemoryLedger,
    model: Option<LoadedModel>,
    policy: Option<OutputPolicy>,
    last_output: Option<SanitizedOutput>,
    loss_report_every: u64,
    loss_sum: f64,
    loss_count: u64,
    backward_count: u64,
    trusted_nanos: u64,
    sealed_path: Option<std::path::PathBuf>,
    torn_down: bool,
}

impl TrustedWorld {
    /// The fixed runtime footprint is charged up front; a budget smaller
    /// than that refuses to start.
    pub fn new(key: [u8; KEY_LEN], budget: SecureBudget) -> Result<Self> {
        budget.validate()?;
        let mut ledger = MemoryLedger::new(budget.ta_available());
        ledger.alloc(LedgerCategory::FixedRuntime, FIXED_RUNTIME_BYTES)?;
        Ok(TrustedWorld {
            key: Some(key),
            budget,
            ledger,
            model: None,
            policy: None,
            last_output: None,
            loss_report_every: 0,
            loss_sum: 0.0,
            loss_count: 0,
            backward_count: 0,
            trusted_nanos: 0,
            sealed_path: None,
            torn_down: false,
        })
    }

    /// Fallback container source for `LoadSealed` messages with an empty
    /// container field (the standalone executable's `--sealed` flag).
    pub fn set_sealed_path(&mut self, path: std::path::PathBuf) {
        self.sealed_path = Some(path);
    }

    pub fn ledger(&self) -> &MemoryLedger {
        &self.ledger
    }

    pub fn trusted_nanos(&self) -> u64 {
        self.trusted_nanos
    }

    pub fn is_torn_down(&self) -> bool {
        self.torn_down
    }

    /// Handle one command, measuring handler time as trusted execution
    /// time. Command-level failures become `Error` replies; the session
    /// stays alive.
    pub fn handle(&mut self, msg: WorldMessage) -> WorldMessage {
        let start = Instant::now();
        let reply = match self.dispatch(msg) {
            Ok(reply) => reply,
            Err(e) => WorldMessage::Error {
                category: error_code(&e),
                message: e.to_string(),
            },
        };
        self.trusted_nanos += start.elapsed().as_nanos() as u64;
        reply
    }

    fn dispatch(&mut self, msg: WorldMessage) -> Result<WorldMessage> {
        match msg {
            WorldMessage::LoadSealed {
                cfg_text,
                loss_report_every,
                container,
            } => self.load_sealed(&cfg_text, loss_report_every, container),
            WorldMessage::Forward {
                activation,
                mode,
                step,
                policy,
            } => self.forward(activation, mode, step, policy),
            WorldMessage::Backward {
                label,
                eta,
                apply_update,
            } => self.backward(label as usize, eta, apply_update),
            WorldMessage::Update { eta } => self.update(eta),
            WorldMessage::GetOutput { policy } => self.get_output(policy),
            WorldMessage::SaveSealed => self.save_sealed(),
            WorldMessage::Teardown => Ok(self.teardown()),
            other => Err(Error::Protocol(format!(
                "unexpected message on trusted side: {other:?}"
            ))),
        }
    }

    fn load_sealed(
        &mut self,
        cfg_text: &str,
        loss_report_every: u64,
        container: Vec<u8>,
    ) -> Result<WorldMessage> {
        if self.torn_down {
            return Err(Error::Protocol("session torn down".into()));
        }
        let container = if container.is_empty() {
            match &self.sealed_path {
                Some(p) => std::fs::read(p)?,
                None => {
                    return Err(Error::Protocol(
                        "empty container and no sealed path configured".into(),
                    ))
                }
            }
        } else {
            container
        };
        // Stage the container bytes, then unseal into parameter memory.
        self.ledger
            .alloc(LedgerCategory::Buffers, container.len() as u64)?;
        let result = self.load_sealed_inner(cfg_text, &container);
        self.ledger
            .free(LedgerCategory::Buffers, container.len() as u64);
        result?;
        self.loss_report_every = loss_report_every;
        Ok(WorldMessage::Ok)
    }

    fn load_sealed_inner(&mut self, cfg_text: &str, container: &[u8]) -> Result<()> {
        let arch = crate::cfg::parse_cfg(cfg_text)?;
        let parsed = SealedContainer::parse(container)?;
        let boundary = parsed.boundary();
        if parsed.last_layer_index() != arch.layer_count() {
            return Err(Error::CountMismatch(format!(
                "container covers layers up to {}, architecture has {}",
                parsed.last_layer_index(),
                arch.layer_count()
            )));
        }
        if boundary >= arch.layer_count() {
            return Err(Error::contract("container has no sealed layers"));
        }
        let key = self.key.ok_or(Error::Protocol("key handle cleared".into()))?;
        let records = parsed.unseal(&key)?;
        let mut fragment = arch.fragment(boundary + 1, arch.layer_count())?;
        let mut param_bytes = 0u64;
        for rec in records {
            let layer = fragment.layer_mut(rec.layer_index)?;
            param_bytes += 4 * (rec.weights.len() + rec.biases.len()) as u64;
            layer.set_params(rec.weights, rec.biases)?;
        }
        self.ledger.replace(LedgerCategory::Parameters, param_bytes)?;
        self.model = Some(LoadedModel {
            net: fragment,
            boundary,
            param_bytes,
            forward_mode: None,
            pending_grads: None,
        });
        Ok(())
    }

    fn require_model(&mut self) -> Result<&mut LoadedModel> {
        if self.torn_down {
            return Err(Error::Protocol("session torn down".into()));
        }
        self.model
            .as_mut()
            .ok_or_else(|| Error::Protocol("command before LoadSealed".into()))
    }

    fn forward(
        &mut self,
        activation: crate::tensor::Tensor,
        mode: Mode,
        step: u64,
        policy: OutputPolicy,
    ) -> Result<WorldMessage> {
        self.require_model()?;
        match self.policy {
            None => self.policy = Some(policy),
            Some(locked) if locked == policy => {}
            Some(_) => {
                return Err(Error::Protocol(
                    "output policy is locked for this session".into(),
                ))
            }
        }
        // Activation caches for the whole suffix reside in trusted memory
        // while the pass runs; dropout masks ride along in train mode.
        let act_bytes: u64 = {
            let model = self.model.as_ref().unwrap();
            model
                .net
                .layers()
                .iter()
                .map(|l| 4 * l.output_shape().count() as u64)
                .sum()
        };
        self.ledger.replace(LedgerCategory::Activations, act_bytes)?;
        let model = self.model.as_mut().unwrap();
        model.net.set_step(step);
        let (from, to) = (
            model.boundary + 1,
            model.net.index_base() + model.net.layer_count(),
        );
        let probs = model.net.forward_range(from, to, &activation, mode)?;
        model.forward_mode = Some(mode);
        let output = sanitize(&probs, self.policy.unwrap())?;
        self.last_output = Some(output.clone());
        Ok(WorldMessage::Sanitized { output })
    }

    fn backward(&mut self, label: usize, eta: f32, apply_update: bool) -> Result<WorldMessage> {
        let grad_bytes: u64 = {
            let model = self.require_model()?;
            if model.forward_mode != Some(Mode::Train) {
                return Err(Error::Protocol(
                    "backward requires a prior train-mode forward".into(),
                ));
            }
            model
                .net
                .layers()
                .iter()
                .map(|l| 4 * (l.param_count() + l.output_shape().count()) as u64)
                .sum()
        };
        self.ledger.replace(LedgerCategory::Gradients, grad_bytes)?;
        let model = self.model.as_mut().unwrap();
        let (from, to) = (
            model.boundary + 1,
            model.net.index_base() + model.net.layer_count(),
        );
        let probs = model
            .net
            .layer(to)?
            .activation_cache()
            .ok_or_else(|| Error::State("no cached output".into()))?
            .clone();
        let loss = cross_entropy_loss(&probs, label)?;
        let seed = cross_entropy_delta(&probs, label)?;
        let (grads, boundary_delta) = model.net.backward_range(to, from, &seed)?;
        if apply_update {
            model.net.apply_updates(&grads, eta)?;
            model.pending_grads = None;
        } else {
            model.pending_grads = Some(grads);
        }
        self.loss_sum += loss as f64;
        self.loss_count += 1;
        self.backward_count += 1;
        let loss_report = if self.loss_report_every > 0
            && self.backward_count % self.loss_report_every == 0
        {
            let mean = (self.loss_sum / self.loss_count as f64) as f32;
            self.loss_sum = 0.0;
            self.loss_count = 0;
            Some(mean)
        } else {
            None
        };
        Ok(WorldMessage::BoundaryDelta {
            delta: boundary_delta,
            loss_report,
        })
    }

    fn update(&mut self, eta: f32) -> Result<WorldMessage> {
        let model = self.require_model()?;
        let grads = model
            .pending_grads
            .take()
            .ok_or_else(|| Error::State("no pending gradients to apply".into()))?;
        model.net.apply_updates(&grads, eta)?;
        Ok(WorldMessage::Ok)
    }

    fn get_output(&mut self, policy: OutputPolicy) -> Result<WorldMessage> {
        self.require_model()?;
        match self.policy {
            Some(locked) if locked == policy => {}
            Some(_) => {
                return Err(Error::Protocol(
                    "output policy is locked for this session".into(),
                ))
            }
            None => return Err(Error::State("no forward has run yet".into())),
        }
        let output = self
            .last_output
            .clone()
            .ok_or_else(|| Error::State("no forward has run yet".into()))?;
        Ok(WorldMessage::Sanitized { output })
    }

    fn save_sealed(&mut self) -> Result<WorldMessage> {
        let key = self.key.ok_or(Error::Protocol("key handle cleared".into()))?;
        let model = self.require_model()?;
        let container = seal_suffix_only(&model.net, model.boundary, &key)?;
        Ok(WorldMessage::SealedBytes {
            container: container.to_bytes(),
        })
    }

    fn teardown(&mut self) -> WorldMessage {
        let stats = WorldMessage::Stats {
            trusted_nanos: self.trusted_nanos,
            ledger_high_water: self.ledger.high_water(),
        };
        self.key = None;
        self.model = None;
        self.last_output = None;
        self.policy = None;
        self.ledger.zero();
        self.torn_down = true;
        stats
    }
}

fn error_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::Validation => 2,
        ErrorCategory::Auth => 3,
        ErrorCategory::OutOfSecureMemory => 4,
        ErrorCategory::Protocol => 5,
        ErrorCategory::Io => 6,
    }
}

pub(crate) fn error_from_reply(category: u8, message: String) -> Error {
    match category {
        3 => Error::Auth,
        4 => Error::OutOfSecureMemory {
            requested: 0,
            available: 0,
        },
        5 => Error::Protocol(message),
        6 => Error::Io(std::io::Error::other(message)),
        _ => Error::Validation(message),
    }
}

/// Serve a frame stream (the standalone trusted executable's main loop).
/// Runs until `Teardown` is answered or the stream closes.
pub fn serve(
    world: &mut TrustedWorld,
    reader: &mut dyn Read,
    writer: &mut dyn Write,
) -> Result<()> {
    let buffer = world.budget.shared_buffer_bytes;
    loop {
        let (tag, payload) = match read_message(reader) {
            Ok(m) => m,
            Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e),
        };
        let msg = match WorldMessage::decode(tag, &payload) {
            Ok(m) => m,
            Err(e) => {
                let reply = WorldMessage::Error {
                    category: error_code(&e),
                    message: e.to_string(),
                };
                let (rtag, rpayload) = reply.encode();
                write_message(writer, rtag, &rpayload, buffer)?;
                continue;
            }
        };
        let done = matches!(msg, WorldMessage::Teardown);
        let reply = world.handle(msg);
        let (rtag, rpayload) = reply.encode();
        write_message(writer, rtag, &rpayload, buffer)?;
        if done {
            return Ok(());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfg::parse_cfg;
    use crate::seal::seal_layers;
    use crate::tensor::Tensor;
    use crate::worlds::plan::MIB;

    const KEY: [u8; 16] = [3u8; 16];

    const CFG: &str = "\
[net]
height=4
width=4
channels=1
classes=3
seed=5

[connected]
output=8
activation=relu

[connected]
output=3

[softmax]

[cost]
";

    fn sealed_at(boundary: usize) -> (Network, Vec<u8>) {
        let mut net = parse_cfg(CFG).unwrap();
        net.init_weights();
        let bytes = seal_layers(&net, boundary, &KEY).unwrap().to_bytes();
        (net, bytes)
    }

    fn world() -> TrustedWorld {
        TrustedWorld::new(KEY, SecureBudget::default()).unwrap()
    }

    #[test]
    fn command_before_load_is_protocol_error() {
        let mut w = world();
        let reply = w.handle(WorldMessage::SaveSealed);
        match reply {
            WorldMessage::Error { category, message } => {
                assert_eq!(category, 5);
                assert!(message.contains("LoadSealed"), "{message}");
            }
            other => panic!("expected error, got {other:?}"),
        }
    }

    #[test]
    fn forward_matches_monolithic_and_is_sanitized() {
        let (mut net, sealed) = sealed_at(1);
        let mut w = world();
        assert_eq!(
            w.handle(WorldMessage::LoadSealed {
                cfg_text: CFG.into(),
                loss_report_every: 0,
                container: sealed,
            }),
            WorldMessage::Ok
        );
        let input = Tensor::from_vec(vec![0.3; 16]);
        let boundary_act = net.forward_range(1, 1, &input, Mode::Infer).unwrap();
        let probs = net.forward_range(2, 4, &boundary_act, Mode::Infer).unwrap();
        let expected = sanitize(&probs, OutputPolicy::top1()).unwrap();
        let reply = w.handle(WorldMessage::Forward {
            activation: boundary_act,
            mode: Mode::Infer,
            step: 0,
            policy: OutputPolicy::top1(),
        });
        assert_eq!(reply, WorldMessage::Sanitized { output: expected });
    }

    #[test]
    fn policy_locks_after_first_forward() {
        let (mut net, sealed) = sealed_at(1);
        let mut w = world();
        w.handle(WorldMessage::LoadSealed {
            cfg_text: CFG.into(),
            loss_report_every: 0,
            container: sealed,
        });
        let input = Tensor::from_vec(vec![0.1; 16]);
        let act = net.forward_range(1, 1, &input, Mode::Infer).unwrap();
        let fwd = |p| WorldMessage::Forward {
            activation: act.clone(),
            mode: Mode::Infer,
            step: 0,
            policy: p,
        };
        assert!(matches!(
            w.handle(fwd(OutputPolicy::top1())),
            WorldMessage::Sanitized { .. }
        ));
        assert!(matches!(
            w.handle(fwd(OutputPolicy::all_ranked())),
            WorldMessage::Error { category: 5, .. }
        ));
    }

    #[test]
    fn suffix_softmax_cost_backward_is_probs_minus_onehot() {
        // trusted part = {softmax, cost} after grouping? Here we force
        // boundary 2 so trusted = {softmax, cost} directly.
        let (mut net, sealed) = sealed_at(2);
        let mut w = world();
        w.handle(WorldMessage::LoadSealed {
            cfg_text: CFG.into(),
            loss_report_every: 0,
            container: sealed,
        });
        let input = Tensor::from_vec(vec![0.25; 16]);
        let logits = net.forward_range(1, 2, &input, Mode::Train).unwrap();
        let reply = w.handle(WorldMessage::Forward {
            activation: logits.clone(),
            mode: Mode::Train,
            step: 0,
            policy: OutputPolicy::raw_baseline(),
        });
        let probs = match reply {
            WorldMessage::Sanitized { output } => output,
            other => panic!("{other:?}"),
        };
        let label = 1u32;
        let reply = w.handle(WorldMessage::Backward {
            label,
            eta: 0.0,
            apply_update: true,
        });
        let delta = match reply {
            WorldMessage::BoundaryDelta { delta, .. } => delta,
            other => panic!("{other:?}"),
        };
        for (i, d) in delta.data().iter().enumerate() {
            let p = probs.entries[i].score.unwrap();
            let expected = if i == label as usize { p - 1.0 } else { p };
            assert!((d - expected).abs() < 1e-6, "i={i} d={d} expected={expected}");
        }
    }

    #[test]
    fn ledger_overflow_errors_and_session_survives() {
        let (mut net, sealed) = sealed_at(1);
        // Budget: fixed runtime fits, model does not.
        let budget = SecureBudget {
            total_bytes: FIXED_RUNTIME_BYTES + 2 * MIB + 300,
            reserve_bytes: 2 * MIB,
            shared_buffer_bytes: MIB,
        };
        let mut w = TrustedWorld::new(KEY, budget).unwrap();
        let reply = w.handle(WorldMessage::LoadSealed {
            cfg_text: CFG.into(),
            loss_report_every: 0,
            container: sealed.clone(),
        });
        assert!(
            matches!(reply, WorldMessage::Error { category: 4, .. }),
            "{reply:?}"
        );
        let total_after = w.ledger().total();
        assert_eq!(total_after, FIXED_RUNTIME_BYTES, "ledger rolled back");
        // The session still answers (and still refuses cleanly).
        let input = Tensor::from_vec(vec![0.1; 16]);
        let act = net.forward_range(1, 1, &input, Mode::Infer).unwrap();
        let reply = w.handle(WorldMessage::Forward {
            activation: act,
            mode: Mode::Infer,
            step: 0,
            policy: OutputPolicy::top1(),
        });
        assert!(matches!(reply, WorldMessage::Error { category: 5, .. }));
    }

    #[test]
    fn teardown_zeroes_ledger_and_reports_stats() {
        let (_, sealed) = sealed_at(1);
        let mut w = world();
        w.handle(WorldMessage::LoadSealed {
            cfg_text: CFG.into(),
            loss_report_every: 0,
            container: sealed,
        });
        let before = w.ledger().total();
        assert!(before >= FIXED_RUNTIME_BYTES);
        let reply = w.handle(WorldMessage::Teardown);
        match reply {
            WorldMessage::Stats {
                ledger_high_water, ..
            } => assert!(ledger_high_water >= before),
            other => panic!("{other:?}"),
        }
        assert_eq!(w.ledger().total(), 0);
        assert!(w.is_torn_down());
    }

    #[test]
    fn save_sealed_round_trips_updated_parameters() {
        let (mut net, sealed) = sealed_at(1);
        let mut w = world();
        w.handle(WorldMessage::LoadSealed {
            cfg_text: CFG.into(),
            loss_report_every: 0,
            container: sealed,
        });
        let input = Tensor::from_vec(vec![0.4; 16]);
        let act = net.forward_range(1, 1, &input, Mode::Train).unwrap();
        w.handle(WorldMessage::Forward {
            activation: act,
            mode: Mode::Train,
            step: 0,
            policy: OutputPolicy::top1(),
        });
        let reply = w.handle(WorldMessage::Backward {
            label: 2,
            eta: 0.1,
            apply_update: true,
        });
        assert!(matches!(reply, WorldMessage::BoundaryDelta { .. }));
        let container = match w.handle(WorldMessage::SaveSealed) {
            WorldMessage::SealedBytes { container } => container,
            other => panic!("{other:?}"),
        };
        let records = SealedContainer::parse(&container)
            .unwrap()
            .unseal(&KEY)
            .unwrap();
        // The trusted fc layer (index 2) must differ from the original net
        // (an update was applied) and be internally consistent.
        let fc = records.iter().find(|r| r.layer_index == 2).unwrap();
        assert_eq!(fc.weights.len(), net.layer(2).unwrap().weights().count());
        assert_ne!(fc.weights, net.layer(2).unwrap().weights().data());
    }
}
