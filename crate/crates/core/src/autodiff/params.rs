use std::fmt::Write as _;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One named block inside a [`ParameterVector`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All trainable parameters of a model, flattened into one array.
///
/// Blocks are stored contiguously in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
    layout: Vec<ParamEntry>,
}

impl ParameterVector {
    pub fn from_tensors(blocks: Vec<(String, Tensor)>) -> Self {
        let mut values = Vec::new();
        let mut layout = Vec::with_capacity(blocks.len());
        for (name, t) in blocks {
            layout.push(ParamEntry {
                name,
                shape: t.shape().to_vec(),
                offset: values.len(),
            });
            values.extend_from_slice(t.data());
        }
        ParameterVector { values, layout }
    }

    /// A vector with the same layout and new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::contract(format!(
                "parameter vector has {} entries, got {}",
                self.values.len(),
                values.len()
            )));
        }
        Ok(ParameterVector {
            values,
            layout: self.layout.clone(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &[ParamEntry] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block(&self, index: usize) -> &[f64] {
        let e = &self.layout[index];
        &self.values[e.offset..e.offset + e.len()]
    }

    /// Splits the flat array back into one tensor per block.
    pub fn unflatten(&self) -> Vec<Tensor> {
        self.layout
            .iter()
            .enumerate()
            .map(|(i, e)| Tensor::new(e.shape.clone(), self.block(i).to_vec()).expect("layout is consistent"))
            .collect()
    }

    /// Places every block on `tape` as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.unflatten().into_iter().map(|t| tape.param(t)).collect()
    }

    /// Text blob: a layout header followed by one value per line.
    pub fn to_blob(&self) -> String {
        let mut out = String::from("name,shape,offset\n");
        for e in &self.layout {
            let shape: Vec<String> = e.shape.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "{},{},{}", e.name, shape.join("x"), e.offset);
        }
        out.push_str("values\n");
        for v in &self.values {
            let _ = writeln!(out, "{}", crate::report::fmt_f64(*v));
        }
        out
    }

    pub fn from_blob(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("name,shape,offset") {
            return Err(Error::Parse("missing parameter layout header".into()));
        }
        let mut layout = Vec::new();
        for line in lines.by_ref() {
            if line == "values" {
                break;
            }
            let parts: Vec<&str> = line.split(',').collect();
            let [name, shape, offset] = parts.as_slice() else {
                return Err(Error::Parse(format!("bad layout line `{line}`")));
            };
            let shape = if shape.is_empty() {
                Vec::new()
            } else {
                shape
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Parse(format!("bad shape in `{line}`: {e}")))?
            };
            let offset = offset
                .parse::<usize>()
                .map_err(|e| Error::Parse(format!("bad offset in `{line}`: {e}")))?;
            layout.push(ParamEntry {
                name: name.to_string(),
                shape,
                offset,
            });
        }
        let values = lines
            .map(|l| {
                l.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("bad value `{l}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut expected = 0;
        for e in &layout {
            if e.offset != expected {
                return Err(Error::Parse(format!(
                    "block `{}` at offset {} is not contiguous",
                    e.name, e.offset
                )));
            }
            expected += e.len();
        }
        if expected != values.len() {
            return Err(Error::Parse(format!(
                "layout covers {expected} values, blob has {}",
                values.len()
            )));
        }
        Ok(ParameterVector { values, layout })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ParameterVector {
        ParameterVector::from_tensors(vec![
            (
                "w".into(),
                Tensor::matrix(2, 3, vec![1.0, -2.5, 3.0, 0.1, 1e-17, -7.0]).unwrap(),
            ),
            ("b".into(), Tensor::vector(vec![0.5, 0.25, 1.0 / 3.0])),
            ("s".into(), Tensor::scalar(42.0)),
        ])
    }

    #[test]
    fn offsets_are_contiguous() {
        let p = sample();
        let offsets: Vec<usize> = p.layout().iter().map(|e| e.offset).collect();
        assert_eq!(offsets, vec![0, 6, 9]);
        assert_eq!(p.len(), 10);
    }

    #[test]
    fn corrupt_blob_rejected() {
        let blob = sample().to_blob();
        assert!(ParameterVector::from_blob(&blob.replace(",9\n", ",8\n")).is_err());
        let truncated: String = blob.lines().take(6).collect::<Vec<_>>().join("\n");
        assert!(ParameterVector::from_blob(&truncated).is_err());
    }

    proptest! {
        #[test]
        fn flatten_unflatten_is_identity(vals in proptest::collection::vec(-1e6f64..1e6, 10)) {
            let p = sample().with_values(vals).unwrap();
            let rebuilt = ParameterVector::from_tensors(
                p.layout().iter().map(|e| e.name.clone()).zip(p.unflatten()).collect(),
            );
            prop_assert_eq!(&rebuilt, &p);
            let bytes_a: Vec<u8> = p.values().iter().flat_map(|v| v.to_le_bytes()).collect();
            let bytes_b: Vec<u8> = rebuilt.values().iter().flat_map(|v| v.to_le_bytes()).collect();
            prop_assert_eq!(bytes_a, bytes_b);
            prop_assert_eq!(ParameterVector::from_blob(&p.to_blob()).unwrap(), p);
        }
    }
}
