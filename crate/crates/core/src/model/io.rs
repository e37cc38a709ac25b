//! Model documents: JSON with weights as hexadecimal floats so a
//! serialize/deserialize round trip is bit-exact.

use serde::{Deserialize, Serialize};

use super::{Block, Layer, Network, TaskLoss};
use crate::error::{Error, Result};
use crate::hexfloat;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MODEL_FORMAT: &str = "packptq-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerDoc {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Vec<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<Vec<String>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlockDoc {
    pub index: usize,
    pub residual: bool,
    pub layers: Vec<LayerDoc>,
}

/// On-disk model schema.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelDocument {
    #[serde(default = "default_format")]
    pub format: String,
    #[serde(default = "default_version")]
    pub version: u32,
    pub name: String,
    pub input_shape: Vec<i64>,
    pub class_count: usize,
    #[serde(default)]
    pub loss: TaskLoss,
    pub stem: Vec<LayerDoc>,
    pub blocks: Vec<BlockDoc>,
    pub head: Vec<LayerDoc>,
}

fn default_format() -> String {
    MODEL_FORMAT.to_string()
}

fn default_version() -> u32 {
    MODEL_VERSION
}

pub(crate) fn encode<T: Scalar>(values: &[T]) -> Vec<String> {
    values.iter().map(|v| hexfloat::format(v.to_f64_exact())).collect()
}

pub(crate) fn decode<T: Scalar>(values: &[String], path: &str) -> Result<Vec<T>> {
    values
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let v = hexfloat::parse(s).map_err(|e| Error::schema(format!("{path}/{i}"), e.to_string()))?;
            let t = T::lit(v);
            if t.to_f64_exact() != v {
                return Err(Error::schema(
                    format!("{path}/{i}"),
                    "value not representable in the target precision",
                ));
            }
            Ok(t)
        })
        .collect()
}

pub(crate) fn dims(shape: &[i64], path: &str) -> Result<Vec<usize>> {
    shape
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            if d <= 0 {
                Err(Error::schema(format!("{path}/{i}"), format!("dimension must be positive, got {d}")))
            } else {
                Ok(d as usize)
            }
        })
        .collect()
}

pub(crate) fn layer_to_doc<T: Scalar>(layer: &Layer<T>) -> LayerDoc {
    let shape_of = |t: &Tensor<T>| Some(t.shape().iter().map(|&d| d as i64).collect());
    match layer {
        Layer::Linear { weight, bias } | Layer::Conv2d { kernel: weight, bias } => LayerDoc {
            kind: layer.kind().to_string(),
            shape: shape_of(weight),
            weights: Some(encode(weight.data())),
            bias: bias.as_ref().map(|b| encode(b.data())),
        },
        Layer::Reshape { shape } => LayerDoc {
            kind: "reshape".into(),
            shape: Some(shape.iter().map(|&d| d as i64).collect()),
            weights: None,
            bias: None,
        },
        Layer::Gelu | Layer::Relu => LayerDoc {
            kind: layer.kind().to_string(),
            shape: None,
            weights: None,
            bias: None,
        },
    }
}

/// `owner` names the enclosing section in messages (e.g. "block 3").
pub(crate) fn layer_from_doc<T: Scalar>(doc: &LayerDoc, path: &str, owner: &str) -> Result<Layer<T>> {
    match doc.kind.as_str() {
        "linear" | "conv2d" => {
            let shape = doc
                .shape
                .as_ref()
                .ok_or_else(|| Error::schema(format!("{path}/shape"), format!("{owner}: missing weight shape")))?;
            let shape = dims(shape, &format!("{path}/shape"))?;
            let want_rank = if doc.kind == "linear" { 2 } else { 4 };
            if shape.len() != want_rank {
                return Err(Error::schema(
                    format!("{path}/shape"),
                    format!("{owner}: {} weight must have rank {want_rank}", doc.kind),
                ));
            }
            let weights = doc
                .weights
                .as_ref()
                .ok_or_else(|| Error::schema(format!("{path}/weights"), format!("{owner}: missing weights")))?;
            let data = decode(weights, &format!("{path}/weights"))?;
            let weight = Tensor::new(shape.clone(), data).map_err(|e| {
                Error::schema(format!("{path}/weights"), format!("{owner}: {e}"))
            })?;
            let out = if doc.kind == "linear" { shape[1] } else { shape[0] };
            let bias = match &doc.bias {
                None => None,
                Some(b) => {
                    let data = decode(b, &format!("{path}/bias"))?;
                    if data.len() != out {
                        return Err(Error::schema(
                            format!("{path}/bias"),
                            format!("{owner}: bias has {} entries, expected {out}", data.len()),
                        ));
                    }
                    Some(Tensor::vector(data))
                }
            };
            Ok(if doc.kind == "linear" {
                Layer::Linear { weight, bias }
            } else {
                Layer::Conv2d { kernel: weight, bias }
            })
        }
        "gelu" => Ok(Layer::Gelu),
        "relu" => Ok(Layer::Relu),
        "reshape" => {
            let shape = doc
                .shape
                .as_ref()
                .ok_or_else(|| Error::schema(format!("{path}/shape"), "reshape needs a shape"))?;
            Ok(Layer::Reshape {
                shape: dims(shape, &format!("{path}/shape"))?,
            })
        }
        other => Err(Error::schema(format!("{path}/kind"), format!("{owner}: unknown layer kind {other:?}"))),
    }
}

impl<T: Scalar> Network<T> {
    pub fn to_document(&self) -> ModelDocument {
        ModelDocument {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            name: self.name.clone(),
            input_shape: self.input_shape.iter().map(|&d| d as i64).collect(),
            class_count: self.class_count,
            loss: self.loss,
            stem: self.stem.iter().map(layer_to_doc).collect(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockDoc {
                    index: b.index,
                    residual: b.residual,
                    layers: b.layers.iter().map(layer_to_doc).collect(),
                })
                .collect(),
            head: self.head.iter().map(layer_to_doc).collect(),
        }
    }

    pub fn from_document(doc: &ModelDocument) -> Result<Self> {
        if doc.format != MODEL_FORMAT {
            return Err(Error::schema("/format", format!("expected {MODEL_FORMAT:?}, got {:?}", doc.format)));
        }
        if doc.version != MODEL_VERSION {
            return Err(Error::schema("/version", format!("unsupported version {}", doc.version)));
        }
        let input_shape = dims(&doc.input_shape, "/input_shape")?;
        let section = |layers: &[LayerDoc], name: &str| -> Result<Vec<Layer<T>>> {
            layers
                .iter()
                .enumerate()
                .map(|(i, l)| layer_from_doc(l, &format!("/{name}/{i}"), name))
                .collect()
        };
        let stem = section(&doc.stem, "stem")?;
        let head = section(&doc.head, "head")?;
        let mut blocks = Vec::with_capacity(doc.blocks.len());
        for (bi, b) in doc.blocks.iter().enumerate() {
            if b.index != bi + 1 {
                return Err(Error::schema(
                    format!("/blocks/{bi}/index"),
                    format!("expected block index {}, got {}", bi + 1, b.index),
                ));
            }
            let owner = format!("block {}", b.index);
            let layers = b
                .layers
                .iter()
                .enumerate()
                .map(|(li, l)| layer_from_doc(l, &format!("/blocks/{bi}/layers/{li}"), &owner))
                .collect::<Result<Vec<_>>>()?;
            blocks.push(Block {
                index: b.index,
                layers,
                residual: b.residual,
            });
        }
        let net = Network {
            name: doc.name.clone(),
            input_shape,
            class_count: doc.class_count,
            stem,
            blocks,
            head,
            loss: doc.loss,
        };
        net.validate().map_err(|e| Error::schema("/", e.to_string()))?;
        Ok(net)
    }
}

/// Model document text for `network`.
pub fn serialize<T: Scalar>(network: &Network<T>) -> Result<String> {
    Ok(serde_json::to_string(&network.to_document())?)
}

pub fn deserialize<T: Scalar>(text: &str) -> Result<Network<T>> {
    let doc: ModelDocument =
        serde_json::from_str(text).map_err(|e| Error::schema("/", e.to_string()))?;
    Network::from_document(&doc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ArchSpec};

    fn net() -> Network<f64> {
        build_model(&ArchSpec::new("resmlp-4x16", 2, 3), 11).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let n = net();
        let back: Network<f64> = deserialize(&serialize(&n).unwrap()).unwrap();
        assert_eq!(back, n);
        let x = Tensor::from_f64(&[2, 2], &[0.3, -1.1, 2.0, 0.25]).unwrap();
        assert_eq!(back.logits(&x).unwrap(), n.logits(&x).unwrap());
    }

    #[test]
    fn f32_round_trip() {
        let n: Network<f32> = build_model(&ArchSpec::new("convnet-2", 2, 3), 1).unwrap();
        let back: Network<f32> = deserialize(&serialize(&n).unwrap()).unwrap();
        assert_eq!(back, n);
    }

    #[test]
    fn negative_dimension_rejected() {
        let mut doc = net().to_document();
        doc.blocks[1].layers[0].shape = Some(vec![16, -16]);
        let err = Network::<f64>::from_document(&doc).unwrap_err();
        match err {
            Error::Schema { path, .. } => assert_eq!(path, "/blocks/1/layers/0/shape/1"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_block_weights_name_the_block() {
        let mut doc = net().to_document();
        doc.blocks[2].layers[2].weights = None;
        let err = Network::<f64>::from_document(&doc).unwrap_err().to_string();
        assert!(err.contains("block 3") && err.contains("/blocks/2/layers/2/weights"), "{err}");
    }

    #[test]
    fn truncated_weights_rejected() {
        let mut doc = net().to_document();
        doc.stem[0].weights.as_mut().unwrap().pop();
        assert!(matches!(Network::<f64>::from_document(&doc), Err(Error::Schema { .. })));
    }
}
