//! Rich-world session: owns the plaintext prefix, talks to the trusted
//! world over the framed channel, and accounts every crossing.
//!
//! A session at boundary `l == L` is the defense-off baseline: the whole
//! model runs rich-side, nothing is sealed, and no channel exists.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::layer::Mode;
use crate::net::{cross_entropy_loss, Network};
use crate::privacy::{sanitize, OutputPolicy, SanitizedOutput};
use crate::seal::{prefix_records, read_key_file, SealedContainer};
use crate::tensor::Tensor;
use crate::weights::weights_from_bytes;
use crate::worlds::plan::{PartitionPlan, SecureBudget};
use crate::worlds::ta::{error_from_reply, TrustedWorld};
use crate::worlds::wire::{frame_message, read_message, write_message, WorldMessage};

/// Channel traffic and per-world execution time. Monotone within a session;
/// `trusted_nanos` is reported by the trusted side at teardown.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChannelStats {
    pub crossings: u64,
    pub bytes_to_trusted: u64,
    pub bytes_to_rich: u64,
    pub rich_nanos: u64,
    pub trusted_nanos: u64,
}

/// Final accounting returned by [`Session::close`].
#[derive(Debug, Clone, Copy, Default)]
pub struct SessionSummary {
    pub stats: ChannelStats,
    pub trusted_ledger_high_water: u64,
    pub rich_memory_bytes: u64,
}

#[derive(Debug, Clone)]
pub enum Transport {
    InProcess,
    TwoProcess { ta_binary: PathBuf },
}

/// Where the model parameters come from.
pub enum ModelSource<'a> {
    SealedBytes(&'a [u8]),
    SealedFile(&'a Path),
    /// `.dtzw` bytes; only valid for the baseline plan `l == L`.
    PlainWeights(&'a [u8]),
    /// An already-populated network; only valid for the baseline plan.
    InMemory(&'a Network),
}

#[derive(Debug, Clone)]
pub struct SessionOptions {
    pub policy: OutputPolicy,
    pub transport: Transport,
    pub budget: SecureBudget,
    /// Trusted-side aggregate loss report cadence; 0 disables it.
    pub loss_report_every: u64,
}

impl Default for SessionOptions {
    fn default() -> Self {
        SessionOptions {
            policy: OutputPolicy::top1(),
            transport: Transport::InProcess,
            budget: SecureBudget::default(),
            loss_report_every: 0,
        }
    }
}

struct RawReply {
    tag: u32,
    payload: Vec<u8>,
    sent_bytes: u64,
    recv_bytes: u64,
    raw_reply: Vec<u8>,
}

trait TransportImpl {
    fn roundtrip(&mut self, tag: u32, payload: &[u8]) -> Result<RawReply>;
    fn shutdown(&mut self);
}

/// Both worlds in one process, still exchanging bit-exact frames.
struct InProcessTransport {
    world: TrustedWorld,
    buffer: u64,
}

impl TransportImpl for InProcessTransport {
    fn roundtrip(&mut self, tag: u32, payload: &[u8]) -> Result<RawReply> {
        let frames = frame_message(tag, payload, self.buffer);
        let sent_bytes: u64 = frames.iter().map(|f| f.len() as u64).sum();
        let request_stream: Vec<u8> = frames.concat();
        let (rtag, rpayload) = read_message(&mut std::io::Cursor::new(request_stream))?;
        let msg = WorldMessage::decode(rtag, &rpayload)?;
        let reply = self.world.handle(msg);
        let (tag2, payload2) = reply.encode();
        let raw_reply: Vec<u8> = frame_message(tag2, &payload2, self.buffer).concat();
        let recv_bytes = raw_reply.len() as u64;
        let (tag3, payload3) = read_message(&mut std::io::Cursor::new(&raw_reply))?;
        Ok(RawReply {
            tag: tag3,
            payload: payload3,
            sent_bytes,
            recv_bytes,
            raw_reply,
        })
    }

    fn shutdown(&mut self) {}
}

/// Reader that mirrors everything it reads into a log.
struct TapReader<R: Read> {
    inner: R,
    log: Vec<u8>,
}

impl<R: Read> Read for TapReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.log.extend_from_slice(&buf[..n]);
        Ok(n)
    }
}

/// Trusted executable on the far side of OS pipes.
struct TwoProcessTransport {
    child: Child,
    buffer: u64,
}

impl TwoProcessTransport {
    fn spawn(
        ta_binary: &Path,
        sealed_path: Option<&Path>,
        key_path: &Path,
        budget: &SecureBudget,
    ) -> Result<Self> {
        let mut cmd = Command::new(ta_binary);
        cmd.arg("--key")
            .arg(key_path)
            .arg("--budget")
            .arg(budget.ta_available().to_string())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit());
        if let Some(p) = sealed_path {
            cmd.arg("--sealed").arg(p);
        }
        let child = cmd.spawn().map_err(|e| {
            Error::SessionRefused(format!(
                "cannot spawn trusted executable {}: {e}",
                ta_binary.display()
            ))
        })?;
        Ok(TwoProcessTransport {
            child,
            buffer: budget.shared_buffer_bytes,
        })
    }
}

impl TransportImpl for TwoProcessTransport {
    fn roundtrip(&mut self, tag: u32, payload: &[u8]) -> Result<RawReply> {
        let stdin = self
            .child
            .stdin
            .as_mut()
            .ok_or_else(|| Error::Protocol("trusted process stdin closed".into()))?;
        let sent_bytes = write_message(stdin, tag, payload, self.buffer)?;
        let stdout = self
            .child
            .stdout
            .as_mut()
            .ok_or_else(|| Error::Protocol("trusted process stdout closed".into()))?;
        let mut tap = TapReader {
            inner: stdout,
            log: Vec::new(),
        };
        let (rtag, rpayload) = read_message(&mut tap)?;
        Ok(RawReply {
            tag: rtag,
            payload: rpayload,
            sent_bytes,
            recv_bytes: tap.log.len() as u64,
            raw_reply: tap.log,
        })
    }

    fn shutdown(&mut self) {
        drop(self.child.stdin.take());
        let _ = self.child.wait();
    }
}

/// Outcome of one partitioned training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStepOutcome {
    /// The actual loss; present only when the cost layer ran rich-side
    /// (baseline `l == L`). Otherwise the loss stays trusted.
    pub visible_loss: Option<f32>,
    /// Trusted-side aggregate loss, when the report cadence says so.
    pub loss_report: Option<f32>,
}

/// An open rich/trusted execution session.
pub struct Session {
    rich: Option<Network>,
    boundary: usize,
    layer_count: usize,
    policy: OutputPolicy,
    transport: Option<Box<dyn TransportImpl>>,
    stats: ChannelStats,
    step: u64,
    budget: SecureBudget,
    trained: bool,
    wire_tap: Option<Vec<u8>>,
    closed: bool,
    summary: SessionSummary,
}

impl Session {
    pub fn boundary(&self) -> usize {
        self.boundary
    }

    pub fn stats(&self) -> ChannelStats {
        self.stats
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn budget(&self) -> &SecureBudget {
        &self.budget
    }

    /// Start capturing every trusted-to-rich byte for leak auditing.
    pub fn enable_wire_tap(&mut self) {
        self.wire_tap = Some(Vec::new());
    }

    pub fn take_tapped_bytes(&mut self) -> Vec<u8> {
        self.wire_tap.replace(Vec::new()).unwrap_or_default()
    }

    /// Rich-side plaintext prefix (layers `1..=l`), if any.
    pub fn rich_net(&self) -> Option<&Network> {
        self.rich.as_ref()
    }

    fn roundtrip(&mut self, msg: WorldMessage) -> Result<WorldMessage> {
        let transport = self
            .transport
            .as_mut()
            .ok_or_else(|| Error::Protocol("baseline session has no trusted side".into()))?;
        let (tag, payload) = msg.encode();
        let raw = transport.roundtrip(tag, &payload)?;
        self.stats.crossings += 1;
        self.stats.bytes_to_trusted += raw.sent_bytes;
        self.stats.bytes_to_rich += raw.recv_bytes;
        if let Some(tap) = self.wire_tap.as_mut() {
            tap.extend_from_slice(&raw.raw_reply);
        }
        let reply = WorldMessage::decode(raw.tag, &raw.payload)?;
        if let WorldMessage::Error { category, message } = reply {
            return Err(error_from_reply(category, message));
        }
        Ok(reply)
    }

    /// Run inference: rich prefix, one Forward exchange, sanitized output
    /// back. Exactly one crossing pair when a trusted side exists.
    pub fn infer(&mut self, input: &Tensor) -> Result<SanitizedOutput> {
        let start = Instant::now();
        let boundary_act = match self.rich.as_mut() {
            Some(rich) => {
                rich.set_step(self.step);
                rich.forward_range(1, self.boundary, input, Mode::Infer)?
            }
            None => input.clone(),
        };
        if self.transport.is_none() {
            // Baseline: the "trusted" duties run rich-side.
            let out = sanitize(&boundary_act, self.policy)?;
            self.stats.rich_nanos += start.elapsed().as_nanos() as u64;
            return Ok(out);
        }
        self.stats.rich_nanos += start.elapsed().as_nanos() as u64;
        let reply = self.roundtrip(WorldMessage::Forward {
            activation: boundary_act,
            mode: Mode::Infer,
            step: self.step,
            policy: self.policy,
        })?;
        match reply {
            WorldMessage::Sanitized { output } => Ok(output),
            other => Err(Error::Protocol(format!(
                "expected sanitized output, got {other:?}"
            ))),
        }
    }

    /// One single-sample SGD step across both worlds: exactly two crossing
    /// pairs (Forward, then Backward which also applies the trusted
    /// update). The boundary delta is the only tensor that returns.
    pub fn train_step(
        &mut self,
        input: &Tensor,
        label: usize,
        eta: f32,
    ) -> Result<TrainStepOutcome> {
        self.trained = true;
        if self.transport.is_none() {
            let start = Instant::now();
            let rich = self.rich.as_mut().expect("baseline holds the full net");
            let loss = rich.train_step(input, label, eta)?;
            self.step = rich.step();
            self.stats.rich_nanos += start.elapsed().as_nanos() as u64;
            return Ok(TrainStepOutcome {
                visible_loss: Some(loss),
                loss_report: None,
            });
        }
        let start = Instant::now();
        let boundary_act = match self.rich.as_mut() {
            Some(rich) => {
                rich.set_step(self.step);
                rich.forward_range(1, self.boundary, input, Mode::Train)?
            }
            None => input.clone(),
        };
        self.stats.rich_nanos += start.elapsed().as_nanos() as u64;
        self.roundtrip(WorldMessage::Forward {
            activation: boundary_act,
            mode: Mode::Train,
            step: self.step,
            policy: self.policy,
        })?;
        let reply = self.roundtrip(WorldMessage::Backward {
            label: label as u32,
            eta,
            apply_update: true,
        })?;
        let (delta, loss_report) = match reply {
            WorldMessage::BoundaryDelta { delta, loss_report } => (delta, loss_report),
            other => {
                return Err(Error::Protocol(format!(
                    "expected boundary delta, got {other:?}"
                )))
            }
        };
        let start = Instant::now();
        if let Some(rich) = self.rich.as_mut() {
            let (grads, _) = rich.backward_range(self.boundary, 1, &delta)?;
            rich.apply_updates(&grads, eta)?;
        }
        self.step += 1;
        self.stats.rich_nanos += start.elapsed().as_nanos() as u64;
        Ok(TrainStepOutcome {
            visible_loss: None,
            loss_report,
        })
    }

    /// Loss of the current model on one example, computed without any
    /// crossing. Only available on baseline sessions, where the cost layer
    /// is rich-side anyway.
    pub fn baseline_loss(&mut self, input: &Tensor, label: usize) -> Result<f32> {
        if self.transport.is_some() {
            return Err(Error::Protocol(
                "loss is trusted when the cost layer is trusted".into(),
            ));
        }
        let rich = self.rich.as_mut().expect("baseline holds the full net");
        let probs = rich.forward_range(1, self.boundary, input, Mode::Infer)?;
        cross_entropy_loss(&probs, label)
    }

    /// Fetch a freshly sealed container of the trusted suffix and splice in
    /// the rich side's current prefix parameters.
    pub fn save_sealed(&mut self) -> Result<Vec<u8>> {
        if self.transport.is_none() {
            return Err(Error::contract(
                "baseline session has no sealed model to save",
            ));
        }
        let reply = self.roundtrip(WorldMessage::SaveSealed)?;
        let container = match reply {
            WorldMessage::SealedBytes { container } => container,
            other => {
                return Err(Error::Protocol(format!(
                    "expected sealed bytes, got {other:?}"
                )))
            }
        };
        let mut parsed = SealedContainer::parse(&container)?;
        if let Some(rich) = &self.rich {
            parsed.set_prefix(prefix_records(rich, self.boundary)?);
        }
        Ok(parsed.to_bytes())
    }

    /// Analytic allocation accounting for the rich side: parameters plus
    /// activation caches (plus gradients if training ran) of the prefix.
    fn rich_memory_bytes(&self) -> u64 {
        let Some(rich) = &self.rich else { return 0 };
        let mut bytes = 0u64;
        for layer in rich.layers() {
            let params = 4 * layer.param_count() as u64;
            let acts = 4 * layer.output_shape().count() as u64;
            bytes += params + acts;
            if self.trained {
                bytes += params + acts;
            }
        }
        bytes
    }

    /// Tear down the trusted side (zeroing its ledger and key handle) and
    /// return the final accounting.
    pub fn close(&mut self) -> Result<SessionSummary> {
        if self.closed {
            return Ok(self.summary);
        }
        let mut summary = SessionSummary {
            stats: self.stats,
            trusted_ledger_high_water: 0,
            rich_memory_bytes: self.rich_memory_bytes(),
        };
        if self.transport.is_some() {
            let reply = self.roundtrip(WorldMessage::Teardown)?;
            summary.stats = self.stats;
            match reply {
                WorldMessage::Stats {
                    trusted_nanos,
                    ledger_high_water,
                } => {
                    summary.stats.trusted_nanos = trusted_nanos;
                    summary.trusted_ledger_high_water = ledger_high_water;
                }
                other => {
                    return Err(Error::Protocol(format!(
                        "expected teardown stats, got {other:?}"
                    )))
                }
            }
            if let Some(t) = self.transport.as_mut() {
                t.shutdown();
            }
            self.transport = None;
        }
        self.stats = summary.stats;
        self.summary = summary;
        self.closed = true;
        Ok(summary)
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        if let Some(t) = self.transport.as_mut() {
            t.shutdown();
        }
    }
}

/// Open a session per an already-validated plan.
///
/// The key path is handed to the trusted side only; the rich side parses
/// the container structurally for its plaintext prefix and never holds
/// suffix parameters.
pub fn open_session(
    cfg_text: &str,
    model: ModelSource,
    key_path: Option<&Path>,
    plan: &PartitionPlan,
    opts: SessionOptions,
) -> Result<Session> {
    if !plan.valid {
        return Err(Error::SessionRefused(format!(
            "partition plan invalid: {}",
            plan.reason.as_deref().unwrap_or("over budget")
        )));
    }
    opts.budget.validate()?;
    let arch = crate::cfg::parse_cfg(cfg_text)?;
    if arch.layer_count() != plan.layer_count {
        return Err(Error::SessionRefused(format!(
            "plan covers {} layers, architecture has {}",
            plan.layer_count,
            arch.layer_count()
        )));
    }
    let l = plan.effective_boundary;
    let total = plan.layer_count;

    if l == total {
        let mut rich = arch;
        match model {
            ModelSource::InMemory(net) => {
                rich = net.clone();
            }
            ModelSource::PlainWeights(bytes) => {
                weights_from_bytes(&mut rich, bytes)?;
            }
            _ => {
                return Err(Error::SessionRefused(
                    "baseline partition (l = L) takes plaintext weights, not a sealed container"
                        .into(),
                ))
            }
        }
        return Ok(Session {
            rich: Some(rich),
            boundary: l,
            layer_count: total,
            policy: opts.policy,
            transport: None,
            stats: ChannelStats::default(),
            step: 0,
            budget: opts.budget,
            trained: false,
            wire_tap: None,
            closed: false,
            summary: SessionSummary::default(),
        });
    }

    let (container_bytes, sealed_path): (Vec<u8>, Option<&Path>) = match model {
        ModelSource::SealedBytes(b) => (b.to_vec(), None),
        ModelSource::SealedFile(p) => (std::fs::read(p)?, Some(p)),
        _ => {
            return Err(Error::SessionRefused(
                "partitioned session needs a sealed container".into(),
            ))
        }
    };
    let parsed = SealedContainer::parse(&container_bytes)?;
    if parsed.boundary() != l {
        return Err(Error::SessionRefused(format!(
            "container sealed at boundary {}, plan wants {}",
            parsed.boundary(),
            l
        )));
    }
    if parsed.last_layer_index() != total {
        return Err(Error::SessionRefused(format!(
            "container covers {} layers, plan covers {total}",
            parsed.last_layer_index()
        )));
    }
    let key_path = key_path.ok_or_else(|| {
        Error::SessionRefused("partitioned session needs a key file for the trusted side".into())
    })?;

    let rich = if l >= 1 {
        let mut prefix = arch.fragment(1, l)?;
        for rec in parsed.prefix() {
            prefix
                .layer_mut(rec.layer_index)?
                .set_params(rec.weights.clone(), rec.biases.clone())?;
        }
        let expected: usize = prefix.layers().iter().filter(|m| m.is_trainable()).count();
        if parsed.prefix().len() != expected {
            return Err(Error::CountMismatch(format!(
                "container has {} prefix records, prefix has {expected} trainable layers",
                parsed.prefix().len()
            )));
        }
        Some(prefix)
    } else {
        None
    };

    let mut transport: Box<dyn TransportImpl> = match &opts.transport {
        Transport::InProcess => {
            let key = read_key_file(key_path)?;
            let world = TrustedWorld::new(key, opts.budget)?;
            Box::new(InProcessTransport {
                world,
                buffer: opts.budget.shared_buffer_bytes,
            })
        }
        Transport::TwoProcess { ta_binary } => Box::new(TwoProcessTransport::spawn(
            ta_binary,
            sealed_path,
            key_path,
            &opts.budget,
        )?),
    };

    // Load the sealed model into the trusted side before declaring the
    // session open; an authentication failure refuses the session.
    let mut session = Session {
        rich,
        boundary: l,
        layer_count: total,
        policy: opts.policy,
        transport: None,
        stats: ChannelStats::default(),
        step: 0,
        budget: opts.budget,
        trained: false,
        wire_tap: None,
        closed: false,
        summary: SessionSummary::default(),
    };
    let load = WorldMessage::LoadSealed {
        cfg_text: cfg_text.to_string(),
        loss_report_every: opts.loss_report_every,
        container: container_bytes,
    };
    let (tag, payload) = load.encode();
    let raw = transport.roundtrip(tag, &payload)?;
    session.stats.crossings += 1;
    session.stats.bytes_to_trusted += raw.sent_bytes;
    session.stats.bytes_to_rich += raw.recv_bytes;
    let reply = WorldMessage::decode(raw.tag, &raw.payload)?;
    match reply {
        WorldMessage::Ok => {}
        WorldMessage::Error { category, message } => {
            transport.shutdown();
            return Err(error_from_reply(category, message));
        }
        other => {
            transport.shutdown();
            return Err(Error::Protocol(format!(
                "unexpected load reply: {other:?}"
            )));
        }
    }
    session.transport = Some(transport);
    Ok(session)
}
