//! JSON model manifest: layer specs plus nested parameter arrays.
//!
//! ```json
//! {"input_length": 500, "classes": 2, "layers": [
//!   {"kind": "conv1d", "in": 1, "out": 3, "kernel": 3, "weights": [[[..]]], "bias": [..]},
//!   {"kind": "relu"}, {"kind": "maxpool1d", "size": 5}, {"kind": "flatten"},
//!   {"kind": "dense", "in": 27, "out": 50, "weights": [[..]], "bias": [..]},
//!   {"kind": "dropout", "p": 0.5}]}
//! ```

use std::path::Path;

use serde_json::{json, Map, Value};

use super::{Layer, Model};
use crate::error::{Error, Result};

impl Model {
    pub fn to_manifest(&self) -> Value {
        let layers: Vec<Value> = self
            .layers()
            .iter()
            .map(|layer| match layer {
                Layer::Conv1d {
                    in_channels,
                    out_channels,
                    kernel,
                    weights,
                    bias,
                } => {
                    let nested: Vec<Value> = weights
                        .chunks(in_channels * kernel)
                        .map(|per_out| Value::Array(per_out.chunks(*kernel).map(decimals).collect()))
                        .collect();
                    json!({"kind": "conv1d", "in": in_channels, "out": out_channels,
                           "kernel": kernel, "weights": nested, "bias": decimals(bias)})
                }
                Layer::Relu => json!({"kind": "relu"}),
                Layer::MaxPool1d { size } => json!({"kind": "maxpool1d", "size": size}),
                Layer::Flatten => json!({"kind": "flatten"}),
                Layer::Dense {
                    inputs,
                    outputs,
                    weights,
                    bias,
                } => {
                    let rows: Vec<Value> = weights.chunks(*inputs).map(decimals).collect();
                    json!({"kind": "dense", "in": inputs, "out": outputs, "weights": rows, "bias": decimals(bias)})
                }
                Layer::Dropout { p } => json!({"kind": "dropout", "p": decimal(*p)}),
            })
            .collect();
        json!({"input_length": self.input_length(), "classes": self.classes(), "layers": layers})
    }

    pub fn to_manifest_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_manifest()).expect("manifest values are serializable")
    }

    pub fn from_manifest_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::ManifestParse(e.to_string()))?;
        Self::from_manifest(&value)
    }

    pub fn from_manifest(value: &Value) -> Result<Self> {
        let root = value
            .as_object()
            .ok_or_else(|| Error::ManifestParse("manifest must be an object".into()))?;
        let input_length = usize_field(root, "input_length")?;
        let classes = usize_field(root, "classes")?;
        let layers = root
            .get("layers")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::ManifestParse("missing layers array".into()))?
            .iter()
            .map(parse_layer)
            .collect::<Result<Vec<_>>>()?;
        Model::new(input_length, classes, layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_manifest_string())
    }

    /// Reads a manifest file. I/O failures surface as `ManifestParse`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ManifestParse(format!("{}: {e}", path.display())))?;
        Self::from_manifest_str(&text)
    }
}

/// Shortest decimal spelling of an `f32`; parses back to the same bits.
fn decimal(v: f32) -> Value {
    format!("{v}")
        .parse::<f64>()
        .ok()
        .and_then(serde_json::Number::from_f64)
        .map_or(Value::Null, Value::Number)
}

fn decimals(values: &[f32]) -> Value {
    Value::Array(values.iter().copied().map(decimal).collect())
}

fn usize_field(obj: &Map<String, Value>, key: &str) -> Result<usize> {
    obj.get(key)
        .and_then(Value::as_u64)
        .map(|v| v as usize)
        .ok_or_else(|| Error::ManifestParse(format!("missing or invalid integer field {key:?}")))
}

fn floats(value: Option<&Value>, what: &str) -> Result<Vec<f32>> {
    fn walk(v: &Value, out: &mut Vec<f32>) -> bool {
        match v {
            Value::Array(items) => items.iter().all(|i| walk(i, out)),
            Value::Number(n) => n.as_f64().map(|f| out.push(f as f32)).is_some(),
            _ => false,
        }
    }
    let mut out = Vec::new();
    match value {
        Some(v) if walk(v, &mut out) => Ok(out),
        _ => Err(Error::ManifestParse(format!("{what} must be a nested numeric array"))),
    }
}

fn parse_layer(value: &Value) -> Result<Layer> {
    let obj = value
        .as_object()
        .ok_or_else(|| Error::ManifestParse("layer must be an object".into()))?;
    let kind = obj
        .get("kind")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::ManifestParse("layer without kind".into()))?;
    Ok(match kind {
        "conv1d" => Layer::Conv1d {
            in_channels: usize_field(obj, "in")?,
            out_channels: usize_field(obj, "out")?,
            kernel: usize_field(obj, "kernel")?,
            weights: floats(obj.get("weights"), "conv1d weights")?,
            bias: floats(obj.get("bias"), "conv1d bias")?,
        },
        "relu" => Layer::Relu,
        "maxpool1d" => Layer::MaxPool1d {
            size: usize_field(obj, "size")?,
        },
        "flatten" => Layer::Flatten,
        "dense" => Layer::Dense {
            inputs: usize_field(obj, "in")?,
            outputs: usize_field(obj, "out")?,
            weights: floats(obj.get("weights"), "dense weights")?,
            bias: floats(obj.get("bias"), "dense bias")?,
        },
        "dropout" => Layer::Dropout {
            p: obj
                .get("p")
                .and_then(Value::as_f64)
                .ok_or_else(|| Error::ManifestParse("dropout without p".into()))? as f32,
        },
        other => return Err(Error::UnknownLayerKind(other.to_string())),
    })
}
