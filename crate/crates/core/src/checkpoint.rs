//! Model checkpoints as JSON. Every parameter is written with 17
//! significant digits, so save → load → save reproduces the same bytes.

use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::activations::Activation;
use crate::deepnet::{DeepOptEqModel, Extractor};
use crate::error::{Error, Result};
use crate::regularizers::Regularizer;
use crate::tensors::{Matrix, Vector};
use crate::unitlayer::LayerParams;

const FORMAT: &str = "opteq-checkpoint";
const VERSION: u32 = 1;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RawMatrix {
    fn into_matrix(self, what: &str) -> Result<Matrix> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Checkpoint(format!(
                "{what}: {} x {} matrix holds {} values",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(Matrix::from_vec(self.rows, self.cols, self.data))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExtractor {
    tanh: bool,
    weight: RawMatrix,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    w: RawMatrix,
    u: RawMatrix,
    b: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStructural {
    reg: Regularizer,
    gamma: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCheckpoint {
    format: String,
    version: u32,
    alpha: f64,
    mu: f64,
    activation: Activation,
    extractor: RawExtractor,
    layers: Vec<RawLayer>,
    readout: RawMatrix,
    structural: Option<RawStructural>,
}

fn num(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").expect("writing to a String");
}

fn list(out: &mut String, values: &[f64]) {
    out.push('[');
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        num(out, *v);
    }
    out.push(']');
}

fn matrix(out: &mut String, m: &Matrix) {
    write!(out, "{{\"rows\": {}, \"cols\": {}, \"data\": ", m.rows(), m.cols()).expect("writing to a String");
    list(out, m.as_slice());
    out.push('}');
}

/// The checkpoint text for `model`.
pub fn to_json(model: &DeepOptEqModel) -> String {
    let mut s = String::new();
    s.push_str("{\n");
    writeln!(s, "  \"format\": \"{FORMAT}\",\n  \"version\": {VERSION},").expect("writing to a String");
    s.push_str("  \"alpha\": ");
    num(&mut s, model.alpha());
    s.push_str(",\n  \"mu\": ");
    num(&mut s, model.mu());
    writeln!(s, ",\n  \"activation\": \"{}\",", model.activation()).expect("writing to a String");
    write!(s, "  \"extractor\": {{\"tanh\": {}, \"weight\": ", model.extractor().tanh).expect("writing to a String");
    matrix(&mut s, &model.extractor().weight);
    s.push_str("},\n  \"layers\": [\n");
    for (i, l) in model.layers().iter().enumerate() {
        s.push_str("    {\"w\": ");
        matrix(&mut s, l.w());
        s.push_str(",\n     \"u\": ");
        matrix(&mut s, l.u());
        s.push_str(",\n     \"b\": ");
        list(&mut s, l.b().as_slice());
        s.push('}');
        s.push_str(if i + 1 < model.depth() { ",\n" } else { "\n" });
    }
    s.push_str("  ],\n  \"readout\": ");
    matrix(&mut s, model.readout());
    s.push_str(",\n  \"structural\": ");
    match model.structural() {
        Some(st) => {
            let reg = serde_json::to_string(&st.reg).expect("regularizer serializes");
            write!(s, "{{\"reg\": {reg}, \"gamma\": ").expect("writing to a String");
            num(&mut s, st.gamma);
            s.push('}');
        }
        None => s.push_str("null"),
    }
    s.push_str("\n}\n");
    s
}

pub fn from_json(text: &str) -> Result<DeepOptEqModel> {
    let raw: RawCheckpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if raw.format != FORMAT {
        return Err(Error::Checkpoint(format!("not a checkpoint (format `{}`)", raw.format)));
    }
    if raw.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", raw.version)));
    }
    let extractor = Extractor {
        weight: raw.extractor.weight.into_matrix("extractor")?,
        tanh: raw.extractor.tanh,
    };
    let layers = raw
        .layers
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            let w = l.w.into_matrix("layer W")?;
            let u = l.u.into_matrix("layer U")?;
            LayerParams::new(w, u, Vector::from_vec(l.b)).map_err(|e| Error::Checkpoint(format!("layer {i}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let readout = raw.readout.into_matrix("readout")?;
    let model = DeepOptEqModel::new(extractor, layers, raw.alpha, raw.mu, raw.activation, readout)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    match raw.structural {
        Some(st) => model
            .append_structural_regularizer(st.reg, st.gamma)
            .map_err(|e| Error::Checkpoint(e.to_string())),
        None => Ok(model),
    }
}

pub fn save(model: &DeepOptEqModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<DeepOptEqModel> {
    from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deepnet::tests::seeded_model;
    use crate::regularizers::Bandwidth;
    use proptest::prelude::*;

    #[test]
    fn round_trip_is_byte_identical() {
        let mut model = seeded_model(&[0.9, 0.3], 4, 3, 0.4, Activation::LeakyRelu(0.1), 5);
        model.extractor_mut().tanh = true;
        let model = model
            .append_structural_regularizer(Regularizer::Hsic { bandwidth: Bandwidth::Fixed(0.7) }, 0.01)
            .unwrap();
        let first = to_json(&model);
        let back = from_json(&first).unwrap();
        assert_eq!(back, model);
        assert_eq!(to_json(&back), first);
    }

    #[test]
    fn file_round_trip() {
        let model = seeded_model(&[0.5], 2, 2, 1.0, Activation::Relu, 1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt.json");
        save(&model, &p).unwrap();
        let first = std::fs::read(&p).unwrap();
        save(&load(&p).unwrap(), &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
    }

    #[test]
    fn malformed_checkpoints_rejected() {
        let good = to_json(&seeded_model(&[0.5], 2, 2, 1.0, Activation::Relu, 1));
        assert!(matches!(from_json(&good.replace("opteq-checkpoint", "other")), Err(Error::Checkpoint(_))));
        assert!(matches!(from_json(&good.replace("\"version\": 1", "\"version\": 9")), Err(Error::Checkpoint(_))));
        assert!(matches!(from_json(&good.replace("\"rows\": 2", "\"rows\": 3")), Err(Error::Checkpoint(_))));
        assert!(matches!(from_json("{}"), Err(Error::Checkpoint(_))));
    }

    proptest! {
        #[test]
        fn any_finite_parameters_round_trip(vals in prop::collection::vec(-1e300f64..1e300, 9), tiny in -1e-300f64..1e-300) {
            let mut vals = vals;
            vals[0] = tiny;
            let w = Matrix::from_vec(2, 2, vals[..4].to_vec());
            let u = Matrix::from_vec(2, 1, vals[4..6].to_vec());
            let b = Vector::from_vec(vals[6..8].to_vec());
            let layer = LayerParams::new(w, u, b).unwrap();
            let model = DeepOptEqModel::new(Extractor::identity(1), vec![layer], 1.0, 1.0, Activation::Tanh, Matrix::from_vec(1, 2, vec![vals[8], 1.0])).unwrap();
            let text = to_json(&model);
            let back = from_json(&text).unwrap();
            prop_assert_eq!(&back, &model);
            prop_assert_eq!(to_json(&back), text);
        }
    }
}
