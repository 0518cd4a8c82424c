//! Finite-difference gradient probes.
//!
//! These are the independent route against which analytic backward passes
//! are judged; they share no code with `backward_layer`.

use crate::error::{Error, Result};
use crate::layer::Mode;
use crate::net::{cross_entropy_loss, Network};
use crate::tensor::Tensor;

/// Central difference `(f(x+h) - f(x-h)) / 2h`.
pub fn central_difference(mut f: impl FnMut(f32) -> f32, x: f32, h: f32) -> f32 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Addressable scalar coordinate of a network's loss function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coordinate {
    /// Flat weight index of a (1-based) layer.
    Weight { layer: usize, index: usize },
    /// Flat bias index of a (1-based) layer.
    Bias { layer: usize, index: usize },
    /// Flat index into the network input.
    Input { index: usize },
}

/// Loss of `net` on `(input, label)` via a full train-mode forward pass.
fn loss_of(net: &mut Network, input: &Tensor, label: usize) -> Result<f32> {
    let (from, to) = (net.index_base() + 1, net.index_base() + net.layer_count());
    let probs = net.forward_range(from, to, input, Mode::Train)?;
    cross_entropy_loss(&probs, label)
}

/// Two-sided finite-difference estimate of `dL/d(coordinate)`.
///
/// Works on a private clone, so the caller's network and input are left
/// untouched. Uses the same step counter as the caller's net so dropout
/// masks match the backward pass under test.
pub fn finite_diff_grad(
    net: &Network,
    input: &Tensor,
    label: usize,
    coordinate: Coordinate,
    h: f32,
) -> Result<f32> {
    // Negative h is fine (the central difference is symmetric in h); zero is not.
    if h == 0.0 {
        return Err(Error::contract("finite difference step h must be nonzero"));
    }
    let eval = |offset: f32| -> Result<f32> {
        let mut probe = net.clone();
        let mut probe_input = input.clone();
        match coordinate {
            Coordinate::Weight { layer, index } => {
                let l = probe.layer_mut(layer)?;
                let w = l.weights_mut_for_probe();
                if index >= w.len() {
                    return Err(Error::contract(format!(
                        "weight index {index} out of range for layer {layer}"
                    )));
                }
                w[index] += offset;
            }
            Coordinate::Bias { layer, index } => {
                let l = probe.layer_mut(layer)?;
                let b = l.biases_mut_for_probe();
                if index >= b.len() {
                    return Err(Error::contract(format!(
                        "bias index {index} out of range for layer {layer}"
                    )));
                }
                b[index] += offset;
            }
            Coordinate::Input { index } => {
                if index >= probe_input.count() {
                    return Err(Error::contract(format!(
                        "input index {index} out of range"
                    )));
                }
                probe_input.data_mut()[index] += offset;
            }
        }
        loss_of(&mut probe, &probe_input, label)
    };
    Ok((eval(h)? - eval(-h)?) / (2.0 * h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::{Activation, LayerKind};
    use crate::tensor::Shape;

    #[test]
    fn quadratic_central_difference() {
        let g = central_difference(|w| w * w, 3.0, 1e-3);
        assert!((g - 6.0).abs() < 1e-3, "g = {g}");
    }

    #[test]
    fn central_difference_symmetric_in_h() {
        let f = |x: f32| x.powi(3) - 2.0 * x;
        let a = central_difference(f, 0.7, 1e-3);
        let b = central_difference(f, 0.7, -1e-3);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn matches_connected_backward() {
        let mut net = Network::new(Shape::new(vec![3]).unwrap(), 2, 0.01, 7).unwrap();
        net.push_layer(LayerKind::Connected {
            out_units: 2,
            activation: Activation::Linear,
        })
        .unwrap();
        net.push_layer(LayerKind::Softmax).unwrap();
        net.push_layer(LayerKind::Cost).unwrap();
        net.init_weights();
        let input = Tensor::from_vec(vec![0.4, -0.8, 0.2]);
        let label = 1;

        let probs = net.forward_range(1, 3, &input, Mode::Train).unwrap();
        let seed = crate::net::cross_entropy_delta(&probs, label).unwrap();
        let (grads, _) = net.backward_range(3, 1, &seed).unwrap();
        let fc = grads.iter().find(|(i, _)| *i == 1).unwrap();

        for index in 0..6 {
            let analytic = fc.1.weight_grad.data()[index];
            let numeric = finite_diff_grad(
                &net,
                &input,
                label,
                Coordinate::Weight { layer: 1, index },
                1e-3,
            )
            .unwrap();
            let denom = analytic.abs().max(numeric.abs()).max(1e-4);
            assert!(
                (analytic - numeric).abs() / denom < 1e-3,
                "w[{index}]: analytic {analytic} numeric {numeric}"
            );
        }
    }

    #[test]
    fn zero_h_rejected() {
        let net = Network::new(Shape::new(vec![1]).unwrap(), 1, 0.1, 0).unwrap();
        let input = Tensor::from_vec(vec![0.0]);
        assert!(finite_diff_grad(
            &net,
            &input,
            0,
            Coordinate::Input { index: 0 },
            0.0
        )
        .is_err());
    }
}
