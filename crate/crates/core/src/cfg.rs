//! Text format for network architectures.
//!
//! A cfg document is a sequence of `[section]` headers with `key=value`
//! lines; `#` starts a comment. The first section must be `[net]` and
//! carries the input dimensions, class count, learning rate, and seed.
//! Every later section is one layer, in execution order:
//!
//! ```text
//! [net]
//! height=32
//! width=32
//! channels=3
//! classes=10
//! learning_rate=0.01
//! seed=1
//!
//! [convolutional]
//! filters=16
//! size=3
//! stride=1
//! pad=1
//! activation=relu
//!
//! [maxpool]
//! size=2
//! stride=2
//!
//! [connected]
//! output=10
//!
//! [softmax]
//!
//! [cost]
//! type=cross_entropy
//! ```
//!
//! Defaults: `stride=1`, `pad=0`, `activation=linear`, dropout
//! `probability=0.5`, cost `type=cross_entropy`, `learning_rate=0.01`,
//! `seed=0`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::layer::{Activation, LayerKind};
use crate::net::Network;
use crate::tensor::Shape;

const LAYER_SECTIONS: &[&str] = &[
    "convolutional",
    "connected",
    "maxpool",
    "dropout",
    "softmax",
    "cost",
];

struct Section {
    name: String,
    line: usize,
    entries: Vec<(String, String, usize)>,
}

fn tokenize(text: &str) -> Result<Vec<Section>> {
    let mut sections: Vec<Section> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or(Error::Parse {
                line: line_no,
                message: format!("malformed section header {line:?}"),
            })?;
            sections.push(Section {
                name: name.trim().to_string(),
                line: line_no,
                entries: Vec::new(),
            });
        } else if let Some(eq) = line.find('=') {
            let section = sections.last_mut().ok_or(Error::Parse {
                line: line_no,
                message: "key=value before any [section]".to_string(),
            })?;
            section.entries.push((
                line[..eq].trim().to_string(),
                line[eq + 1..].trim().to_string(),
                line_no,
            ));
        } else {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected [section] or key=value, got {line:?}"),
            });
        }
    }
    Ok(sections)
}

struct Keys {
    section: String,
    map: HashMap<String, (String, usize)>,
}

impl Keys {
    fn new(section: &Section, allowed: &[&str]) -> Result<Self> {
        let mut map = HashMap::new();
        for (k, v, line) in &section.entries {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::Parse {
                    line: *line,
                    message: format!("unknown key {k:?} in [{}]", section.name),
                });
            }
            map.insert(k.clone(), (v.clone(), *line));
        }
        Ok(Keys {
            section: section.name.clone(),
            map,
        })
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.map.get(key) {
            None => Ok(None),
            Some((v, line)) => v.parse::<T>().map(Some).map_err(|_| Error::Parse {
                line: *line,
                message: format!("invalid value {v:?} for {key} in [{}]", self.section),
            }),
        }
    }

    fn require<T: std::str::FromStr>(&self, key: &str, section_line: usize) -> Result<T> {
        self.parse(key)?.ok_or(Error::Parse {
            line: section_line,
            message: format!("[{}] is missing required key {key}", self.section),
        })
    }

    fn activation(&self, default: Activation) -> Result<Activation> {
        match self.map.get("activation") {
            None => Ok(default),
            Some((v, line)) => match v.as_str() {
                "linear" => Ok(Activation::Linear),
                "relu" => Ok(Activation::Relu),
                other => Err(Error::Parse {
                    line: *line,
                    message: format!("unknown activation {other:?} (expected linear or relu)"),
                }),
            },
        }
    }
}

/// Parse a cfg document into a classification network with chained shapes.
/// Weights are left zeroed; call `init_weights` or load a weights file.
pub fn parse_cfg(text: &str) -> Result<Network> {
    let sections = tokenize(text)?;
    let first = sections
        .first()
        .ok_or(Error::Validation("no layers".into()))?;
    if first.name != "net" {
        return Err(Error::Parse {
            line: first.line,
            message: format!("first section must be [net], got [{}]", first.name),
        });
    }
    let net_keys = Keys::new(
        first,
        &[
            "height",
            "width",
            "channels",
            "classes",
            "learning_rate",
            "seed",
        ],
    )?;
    let height: usize = net_keys.require("height", first.line)?;
    let width: usize = net_keys.require("width", first.line)?;
    let channels: usize = net_keys.require("channels", first.line)?;
    let classes: usize = net_keys.require("classes", first.line)?;
    let learning_rate: f32 = net_keys.parse("learning_rate")?.unwrap_or(0.01);
    let seed: u64 = net_keys.parse("seed")?.unwrap_or(0);

    let input_shape = Shape::new(vec![height, width, channels])?;
    let mut net = Network::new(input_shape, classes, learning_rate, seed)?;

    if sections.len() == 1 {
        return Err(Error::Validation("no layers".into()));
    }

    for section in &sections[1..] {
        if !LAYER_SECTIONS.contains(&section.name.as_str()) {
            return Err(Error::Parse {
                line: section.line,
                message: format!("unknown section [{}]", section.name),
            });
        }
        let kind = match section.name.as_str() {
            "convolutional" => {
                let keys =
                    Keys::new(section, &["filters", "size", "stride", "pad", "activation"])?;
                let size: usize = keys.require("size", section.line)?;
                LayerKind::Convolutional {
                    out_channels: keys.require("filters", section.line)?,
                    kernel_h: size,
                    kernel_w: size,
                    stride: keys.parse("stride")?.unwrap_or(1),
                    pad: keys.parse("pad")?.unwrap_or(0),
                    activation: keys.activation(Activation::Linear)?,
                }
            }
            "connected" => {
                let keys = Keys::new(section, &["output", "activation"])?;
                LayerKind::Connected {
                    out_units: keys.require("output", section.line)?,
                    activation: keys.activation(Activation::Linear)?,
                }
            }
            "maxpool" => {
                let keys = Keys::new(section, &["size", "stride"])?;
                LayerKind::Maxpool {
                    kernel: keys.require("size", section.line)?,
                    stride: keys.parse("stride")?.unwrap_or(1),
                }
            }
            "dropout" => {
                let keys = Keys::new(section, &["probability"])?;
                LayerKind::Dropout {
                    rate: keys.parse("probability")?.unwrap_or(0.5),
                }
            }
            "softmax" => {
                Keys::new(section, &[])?;
                LayerKind::Softmax
            }
            "cost" => {
                let keys = Keys::new(section, &["type"])?;
                if let Some(t) = keys.parse::<String>("type")? {
                    if t != "cross_entropy" {
                        return Err(Error::Parse {
                            line: section.line,
                            message: format!("unsupported cost type {t:?}"),
                        });
                    }
                }
                LayerKind::Cost
            }
            _ => unreachable!(),
        };
        let prev_desc = net
            .layers()
            .last()
            .map(|l| format!("layer {} ({})", net.layer_count(), l.kind().name()))
            .unwrap_or_else(|| "network input".to_string());
        let next_index = net.layer_count() + 1;
        net.push_layer(kind).map_err(|e| {
            Error::validation(format!(
                "layer {next_index} ([{}], line {}) cannot follow {prev_desc}: {e}",
                section.name, section.line
            ))
        })?;
    }

    net.validate_classification()?;
    Ok(net)
}

/// Canonical cfg emission; `parse_cfg(emit_cfg(net))` reproduces the
/// network definition exactly.
pub fn emit_cfg(net: &Network) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let s = net.input_shape();
    writeln!(out, "[net]").unwrap();
    writeln!(out, "height={}", s[0]).unwrap();
    writeln!(out, "width={}", s[1]).unwrap();
    writeln!(out, "channels={}", s[2]).unwrap();
    writeln!(out, "classes={}", net.class_count()).unwrap();
    writeln!(out, "learning_rate={}", net.learning_rate()).unwrap();
    writeln!(out, "seed={}", net.rng_seed()).unwrap();
    for layer in net.layers() {
        out.push('\n');
        match *layer.kind() {
            LayerKind::Convolutional {
                out_channels,
                kernel_h,
                kernel_w: _,
                stride,
                pad,
                activation,
            } => {
                writeln!(out, "[convolutional]").unwrap();
                writeln!(out, "filters={out_channels}").unwrap();
                writeln!(out, "size={kernel_h}").unwrap();
                writeln!(out, "stride={stride}").unwrap();
                writeln!(out, "pad={pad}").unwrap();
                writeln!(out, "activation={}", activation.name()).unwrap();
            }
            LayerKind::Connected {
                out_units,
                activation,
            } => {
                writeln!(out, "[connected]").unwrap();
                writeln!(out, "output={out_units}").unwrap();
                writeln!(out, "activation={}", activation.name()).unwrap();
            }
            LayerKind::Maxpool { kernel, stride } => {
                writeln!(out, "[maxpool]").unwrap();
                writeln!(out, "size={kernel}").unwrap();
                writeln!(out, "stride={stride}").unwrap();
            }
            LayerKind::Dropout { rate } => {
                writeln!(out, "[dropout]").unwrap();
                writeln!(out, "probability={rate}").unwrap();
            }
            LayerKind::Softmax => writeln!(out, "[softmax]").unwrap(),
            LayerKind::Cost => {
                writeln!(out, "[cost]").unwrap();
                writeln!(out, "type=cross_entropy").unwrap();
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINI: &str = "\
[net]
height=8
width=8
channels=1
classes=4
learning_rate=0.05
seed=3

[convolutional]
filters=2
size=3
pad=1
activation=relu

[maxpool]
size=2
stride=2

[connected]
output=4

[softmax]

[cost]
";

    #[test]
    fn parses_and_chains_shapes() {
        let net = parse_cfg(MINI).unwrap();
        assert_eq!(net.layer_count(), 5);
        assert_eq!(net.layer(1).unwrap().output_shape().extents(), &[8, 8, 2]);
        assert_eq!(net.layer(2).unwrap().output_shape().extents(), &[4, 4, 2]);
        assert_eq!(net.layer(3).unwrap().output_shape().extents(), &[4]);
        assert_eq!(net.learning_rate(), 0.05);
        assert_eq!(net.rng_seed(), 3);
    }

    #[test]
    fn net_only_document_is_no_layers() {
        let err = parse_cfg("[net]\nheight=4\nwidth=4\nchannels=1\nclasses=2\n").unwrap_err();
        assert!(err.to_string().contains("no layers"), "{err}");
    }

    #[test]
    fn unknown_section_names_line() {
        let text = format!("{MINI}\n[batchnorm]\nmomentum=0.9\n");
        let err = parse_cfg(&text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("unknown section") && msg.contains("line"), "{msg}");
    }

    #[test]
    fn unknown_key_names_line() {
        let text = MINI.replace("pad=1", "padding=1");
        let err = parse_cfg(&text).unwrap_err();
        assert!(err.to_string().contains("unknown key"), "{err}");
    }

    #[test]
    fn shape_chain_break_names_both_layers() {
        // convolution after connected: flat input cannot feed a conv layer
        let text = "\
[net]
height=4
width=4
channels=1
classes=2

[connected]
output=2

[convolutional]
filters=1
size=3

[softmax]

[cost]
";
        let err = parse_cfg(text).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("layer 2") && msg.contains("layer 1 (connected)"),
            "{msg}"
        );
    }

    #[test]
    fn softmax_width_must_match_classes() {
        let text = MINI.replace("output=4", "output=5");
        let err = parse_cfg(&text).unwrap_err();
        assert!(err.to_string().contains("class count"), "{err}");
    }

    #[test]
    fn emit_parse_is_fixed_point() {
        let net = parse_cfg(MINI).unwrap();
        let emitted = emit_cfg(&net);
        let reparsed = parse_cfg(&emitted).unwrap();
        assert_eq!(emit_cfg(&reparsed), emitted);
        assert_eq!(reparsed.layer_count(), net.layer_count());
        for i in 1..=net.layer_count() {
            assert_eq!(
                reparsed.layer(i).unwrap().kind(),
                net.layer(i).unwrap().kind()
            );
        }
    }
}
