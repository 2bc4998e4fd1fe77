//! Text serialization of layer parameters.
//!
//! Each layer is a header line `layer <name> shape <dims..> [bias <n>]
//! frozen <0|1>` followed by one scalar per line, weights then bias.
//! Scalars are written in shortest round-trip decimal form, so a
//! save/load cycle is bit-exact.

use std::fmt::Write as _;

use super::params::LayerParams;
use crate::error::{Error, Result};

pub fn write_layers(out: &mut String, layers: &[LayerParams]) {
    for layer in layers {
        let dims: Vec<String> = layer.shape().iter().map(ToString::to_string).collect();
        write!(out, "layer {} shape {}", layer.name(), dims.join(" ")).unwrap();
        if let Some(b) = layer.bias() {
            write!(out, " bias {}", b.len()).unwrap();
        }
        writeln!(out, " frozen {}", u8::from(layer.is_frozen())).unwrap();
        for v in layer.params() {
            writeln!(out, "{v:?}").unwrap();
        }
    }
}

/// Parses layers from `(line_number, line)` pairs until input ends.
pub fn read_layers<'a>(lines: &mut impl Iterator<Item = (usize, &'a str)>) -> Result<Vec<LayerParams>> {
    let mut layers = Vec::new();
    while let Some((n, header)) = lines.next() {
        let tokens: Vec<&str> = header.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        let (name, shape, bias, frozen) = parse_header(&tokens).ok_or_else(|| Error::parse(n, format!("bad layer header `{header}`")))?;
        let mut layer = LayerParams::zeros(name, &shape, bias);
        layer.set_frozen(frozen);
        for i in 0..layer.parameter_count() {
            let (m, line) = lines.next().ok_or_else(|| Error::parse(n, "truncated layer"))?;
            *layer.param_mut(i) = line
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(m, format!("bad scalar `{line}`")))?;
        }
        layers.push(layer);
    }
    Ok(layers)
}

fn parse_header(tokens: &[&str]) -> Option<(String, Vec<usize>, Option<usize>, bool)> {
    let [kw_layer, name, kw_shape, rest @ ..] = tokens else {
        return None;
    };
    if *kw_layer != "layer" || *kw_shape != "shape" {
        return None;
    }
    let mut dims = Vec::new();
    let mut i = 0;
    while let Some(Ok(d)) = rest.get(i).map(|t| t.parse::<usize>()) {
        dims.push(d);
        i += 1;
    }
    let mut bias = None;
    if rest.get(i) == Some(&"bias") {
        bias = Some(rest.get(i + 1)?.parse().ok()?);
        i += 2;
    }
    let frozen = match rest.get(i..)? {
        ["frozen", "0"] => false,
        ["frozen", "1"] => true,
        _ => return None,
    };
    if dims.is_empty() {
        return None;
    }
    Some((name.to_string(), dims, bias, frozen))
}
