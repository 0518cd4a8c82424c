//! Output sanitization: what a prediction looks like when it leaves the
//! trusted world.
//!
//! Exactly one policy is in force per session. `Raw` bypasses sanitization
//! and exists for benchmark/attack-baseline runs only; parsing user input
//! refuses it unless the caller opts in.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::net::check_prob_vector;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Top1,
    Top5,
    AllRanked,
    Raw,
}

impl PolicyKind {
    fn tag(self) -> u8 {
        match self {
            PolicyKind::Top1 => 0,
            PolicyKind::Top5 => 1,
            PolicyKind::AllRanked => 2,
            PolicyKind::Raw => 3,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => PolicyKind::Top1,
            1 => PolicyKind::Top5,
            2 => PolicyKind::AllRanked,
            3 => PolicyKind::Raw,
            other => {
                return Err(Error::Framing(format!("unknown policy tag {other}")));
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Top1 => "top1",
            PolicyKind::Top5 => "top5",
            PolicyKind::AllRanked => "all",
            PolicyKind::Raw => "raw",
        }
    }
}

/// Sanitization policy: which classes leave the trusted world, and whether
/// their confidence scores come along (`include_scores = false` releases
/// ranks only).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutputPolicy {
    pub kind: PolicyKind,
    pub include_scores: bool,
}

impl OutputPolicy {
    pub fn top1() -> Self {
        OutputPolicy {
            kind: PolicyKind::Top1,
            include_scores: true,
        }
    }

    pub fn top5() -> Self {
        OutputPolicy {
            kind: PolicyKind::Top5,
            include_scores: true,
        }
    }

    pub fn all_ranked() -> Self {
        OutputPolicy {
            kind: PolicyKind::AllRanked,
            include_scores: true,
        }
    }

    /// Defense-off baseline; only for benchmarks and attack baselines.
    pub fn raw_baseline() -> Self {
        OutputPolicy {
            kind: PolicyKind::Raw,
            include_scores: true,
        }
    }

    pub fn without_scores(mut self) -> Self {
        self.include_scores = false;
        self
    }

    /// Parse a user-facing policy name. `raw` is accepted only when
    /// `allow_raw` is set (benchmark/attack contexts).
    pub fn parse(s: &str, allow_raw: bool) -> Result<Self> {
        match s {
            "top1" => Ok(Self::top1()),
            "top5" => Ok(Self::top5()),
            "all" | "all-ranked" => Ok(Self::all_ranked()),
            "raw" if allow_raw => Ok(Self::raw_baseline()),
            "raw" => Err(Error::validation(
                "policy 'raw' is only available in benchmark/attack-baseline mode",
            )),
            other => Err(Error::validation(format!(
                "unknown policy {other:?} (expected top1, top5, all, raw)"
            ))),
        }
    }

    pub(crate) fn to_wire(self) -> [u8; 2] {
        [self.kind.tag(), self.include_scores as u8]
    }

    pub(crate) fn from_wire(bytes: [u8; 2]) -> Result<Self> {
        Ok(OutputPolicy {
            kind: PolicyKind::from_tag(bytes[0])?,
            include_scores: bytes[1] != 0,
        })
    }
}

/// One released prediction entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OutputEntry {
    pub class: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f32>,
}

/// A sanitized prediction: ordered entries plus the policy that shaped it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SanitizedOutput {
    pub policy: PolicyKind,
    /// Set when a Top5 request was widened to AllRanked because the
    /// network has fewer than five classes.
    pub downgraded: bool,
    pub entries: Vec<OutputEntry>,
}

impl SanitizedOutput {
    /// Highest-ranked class (for Raw, the argmax of the released vector).
    pub fn top_class(&self) -> u32 {
        match self.policy {
            PolicyKind::Raw => {
                let mut best = 0usize;
                let mut best_v = f32::NEG_INFINITY;
                for (i, e) in self.entries.iter().enumerate() {
                    let v = e.score.unwrap_or(0.0);
                    if v > best_v {
                        best_v = v;
                        best = i;
                    }
                }
                self.entries[best].class
            }
            _ => self.entries[0].class,
        }
    }

    /// Wire form: tag byte (policy | 0x40 downgraded | 0x80 scores omitted),
    /// entry count u32, then per entry a u32 class and, when scores are
    /// included, an f32 score. Little-endian throughout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let scores_included = self.entries.first().is_none_or(|e| e.score.is_some());
        let mut tag = self.policy.tag();
        if self.downgraded {
            tag |= 0x40;
        }
        if !scores_included {
            tag |= 0x80;
        }
        let mut out = vec![tag];
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&e.class.to_le_bytes());
            if scores_included {
                out.extend_from_slice(&e.score.unwrap_or(0.0).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 {
            return Err(Error::Truncated("sanitized output".into()));
        }
        let tag = bytes[0];
        let policy = PolicyKind::from_tag(tag & 0x3f)?;
        let downgraded = tag & 0x40 != 0;
        let with_scores = tag & 0x80 == 0;
        let count = u32::from_le_bytes([bytes[1], bytes[2], bytes[3], bytes[4]]) as usize;
        let entry_len = if with_scores { 8 } else { 4 };
        if bytes.len() != 5 + count * entry_len {
            return Err(Error::Truncated(format!(
                "sanitized output: expected {} bytes, got {}",
                5 + count * entry_len,
                bytes.len()
            )));
        }
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let at = 5 + i * entry_len;
            let class = u32::from_le_bytes([
                bytes[at],
                bytes[at + 1],
                bytes[at + 2],
                bytes[at + 3],
            ]);
            let score = if with_scores {
                Some(f32::from_le_bytes([
                    bytes[at + 4],
                    bytes[at + 5],
                    bytes[at + 6],
                    bytes[at + 7],
                ]))
            } else {
                None
            };
            entries.push(OutputEntry { class, score });
        }
        Ok(SanitizedOutput {
            policy,
            downgraded,
            entries,
        })
    }
}

/// Apply `policy` to a probability vector. Ordering is by descending score
/// with ties broken by ascending class index.
pub fn sanitize(probs: &Tensor, policy: OutputPolicy) -> Result<SanitizedOutput> {
    check_prob_vector(probs)?;
    let n = probs.count();
    let score_of = |i: usize| -> Option<f32> {
        if policy.include_scores {
            Some(probs.data()[i])
        } else {
            None
        }
    };
    let ranked = || -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| {
            probs.data()[b]
                .partial_cmp(&probs.data()[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        idx
    };
    let (kind, downgraded, order): (PolicyKind, bool, Vec<usize>) = match policy.kind {
        PolicyKind::Top1 => (PolicyKind::Top1, false, ranked().into_iter().take(1).collect()),
        PolicyKind::Top5 => {
            if n < 5 {
                (PolicyKind::AllRanked, true, ranked())
            } else {
                (PolicyKind::Top5, false, ranked().into_iter().take(5).collect())
            }
        }
        PolicyKind::AllRanked => (PolicyKind::AllRanked, false, ranked()),
        PolicyKind::Raw => (PolicyKind::Raw, false, (0..n).collect()),
    };
    Ok(SanitizedOutput {
        policy: kind,
        downgraded,
        entries: order
            .into_iter()
            .map(|i| OutputEntry {
                class: i as u32,
                score: score_of(i),
            })
            .collect(),
    })
}
