//! Architecture strings.
//!
//! * `lenet300100`: 784-300-100-10 relu MLP.
//! * `lenet5`: `conv20x5,pool2,conv50x5,pool2,flatten,dense500,dense10` on 1x28x28.
//! * `mlp:<d0>-<d1>-...-<classes>[:<activation>]`, e.g. `mlp:784-100-50-10`.
//! * `cnn:[CxHxW:]<layer>,<layer>,...` with layers `conv<out>x<k>[s<stride>][p<pad>][:<act>]`,
//!   `pool<k>[s<stride>]`, `flatten`, `dense<out>[:<act>]`. The input defaults to `1x28x28`.
//!
//! Hidden layers use relu unless told otherwise; the last dense layer is
//! always identity. Parameters come out zeroed; see `pipeline::init_params`.

use crate::error::{Error, Result};
use crate::network::{Activation, ConvLayer, DenseLayer, Layer, MaxPool, Network};
use crate::scalar::Scalar;
use crate::tensor::ConvGeometry;

fn bad(spec: &str, why: impl std::fmt::Display) -> Error {
    Error::Config(format!("model `{spec}`: {why}"))
}

fn num(spec: &str, s: &str) -> Result<usize> {
    match s.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(bad(spec, format!("`{s}` is not a positive integer"))),
    }
}

fn split_act<'a>(spec: &str, token: &'a str) -> Result<(&'a str, Activation)> {
    match token.split_once(':') {
        Some((body, act)) => Ok((body, act.parse().map_err(|e| bad(spec, e))?)),
        None => Ok((token, Activation::Relu)),
    }
}

/// Builds the zero-initialized network described by `spec`.
pub fn build<T: Scalar>(spec: &str) -> Result<Network<T>> {
    match spec {
        "lenet300100" => mlp(spec, &[784, 300, 100, 10], Activation::Relu),
        "lenet5" => cnn(spec, "1x28x28:conv20x5,pool2,conv50x5,pool2,flatten,dense500,dense10"),
        _ => {
            if let Some(rest) = spec.strip_prefix("mlp:") {
                let (dims, act) = split_act(spec, rest)?;
                let dims = dims.split('-').map(|d| num(spec, d)).collect::<Result<Vec<_>>>()?;
                if dims.len() < 2 {
                    return Err(bad(spec, "needs at least input and output sizes"));
                }
                mlp(spec, &dims, act)
            } else if let Some(rest) = spec.strip_prefix("cnn:") {
                cnn(spec, rest)
            } else {
                Err(bad(spec, "expected lenet300100, lenet5, mlp:<dims> or cnn:<layers>"))
            }
        }
    }
}

fn mlp<T: Scalar>(spec: &str, dims: &[usize], act: Activation) -> Result<Network<T>> {
    let last = dims.len() - 2;
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let a = if i == last { Activation::Identity } else { act };
            Layer::Dense(DenseLayer::zeros(w[0], w[1], a))
        })
        .collect();
    Network::new(vec![dims[0]], layers).map_err(|e| bad(spec, e))
}

fn cnn<T: Scalar>(spec: &str, body: &str) -> Result<Network<T>> {
    let (input, layers) = match body.split_once(':') {
        Some((shape, rest)) if shape.contains('x') && !shape.contains(',') && !shape.starts_with(char::is_alphabetic) => {
            let dims = shape.split('x').map(|d| num(spec, d)).collect::<Result<Vec<_>>>()?;
            if dims.len() != 3 {
                return Err(bad(spec, "input shape must be CxHxW"));
            }
            (dims, rest)
        }
        _ => (vec![1, 28, 28], body),
    };
    let tokens: Vec<&str> = layers.split(',').map(str::trim).collect();
    let mut shape = input.clone();
    let mut out = Vec::with_capacity(tokens.len());
    for (k, token) in tokens.iter().enumerate() {
        let is_last = k + 1 == tokens.len();
        let layer = if let Some(rest) = token.strip_prefix("conv") {
            let (body, act) = split_act(spec, rest)?;
            let (head, pad) = match body.split_once('p') {
                Some((h, p)) => (h, p.parse().map_err(|_| bad(spec, format!("bad padding `{p}`")))?),
                None => (body, 0),
            };
            let (head, stride) = match head.split_once('s') {
                Some((h, s)) => (h, num(spec, s)?),
                None => (head, 1),
            };
            let (filters, kernel) = head
                .split_once('x')
                .ok_or_else(|| bad(spec, format!("`{token}`: expected conv<out>x<kernel>")))?;
            let channels = *shape
                .first()
                .filter(|_| shape.len() == 3)
                .ok_or_else(|| bad(spec, format!("`{token}` needs a CxHxW input")))?;
            Layer::Conv(ConvLayer::zeros(
                channels,
                num(spec, filters)?,
                num(spec, kernel)?,
                ConvGeometry::new((stride, stride), (pad, pad)),
                act,
            ))
        } else if let Some(rest) = token.strip_prefix("pool") {
            let (w, s) = match rest.split_once('s') {
                Some((w, s)) => (num(spec, w)?, num(spec, s)?),
                None => {
                    let w = num(spec, rest)?;
                    (w, w)
                }
            };
            Layer::MaxPool(MaxPool::new(w, s))
        } else if *token == "flatten" {
            Layer::Flatten
        } else if let Some(rest) = token.strip_prefix("dense") {
            let (body, act) = split_act(spec, rest)?;
            if shape.len() != 1 {
                return Err(bad(spec, format!("`{token}` needs a flat input; insert `flatten`")));
            }
            let act = if is_last { Activation::Identity } else { act };
            Layer::Dense(DenseLayer::zeros(shape[0], num(spec, body)?, act))
        } else {
            return Err(bad(spec, format!("unknown layer `{token}`")));
        };
        shape = layer.output_shape(&shape).map_err(|e| bad(spec, e))?;
        out.push(layer);
    }
    Network::new(input, out).map_err(|e| bad(spec, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lenet_parameter_counts() {
        let net: Network<f32> = build("lenet300100").unwrap();
        assert_eq!(net.parameter_count(), 266_610);
        assert_eq!(net.input_shape(), &[784]);
        let net: Network<f32> = build("lenet5").unwrap();
        assert_eq!(net.parameter_count(), 431_080);
        assert_eq!(net.input_shape(), &[1, 28, 28]);
    }

    #[test]
    fn mlp_and_cnn_strings() {
        let net: Network<f64> = build("mlp:784-100-50-10").unwrap();
        assert_eq!(net.parameter_count(), 784 * 100 + 100 + 100 * 50 + 50 + 50 * 10 + 10);
        let net: Network<f64> = build("mlp:4-3-2:tanh").unwrap();
        match &net.layers()[0] {
            Layer::Dense(d) => assert_eq!(d.activation, Activation::Tanh),
            _ => panic!(),
        }
        let net: Network<f64> = build("cnn:3x8x8:conv4x3s1p1:elu,pool2,flatten,dense10").unwrap();
        assert_eq!(net.layer_shapes().unwrap()[0], vec![4, 8, 8]);
        assert_eq!(net.classes(), 10);
        let net: Network<f64> = build("cnn:conv2x5s2,flatten,dense3").unwrap();
        assert_eq!(net.layer_shapes().unwrap()[0], vec![2, 12, 12]);
    }

    #[test]
    fn rejects_malformed_strings() {
        for s in ["resnet", "mlp:10", "mlp:10-x", "cnn:conv2x3,dense4", "cnn:conv0x3,flatten,dense2", "cnn:blob"] {
            assert!(matches!(build::<f32>(s), Err(Error::Config(_))), "{s}");
        }
    }
}
