use candle_core::Tensor;

use crate::backends::JointEncoder;
use crate::error::{Error, Result};

/// A shape prompt and an optional colour prompt with their embeddings.
#[derive(Debug, Clone)]
pub struct TextCondition {
    shape_prompt: String,
    color_prompt: Option<String>,
    shape_embedding: Tensor,
    color_embedding: Option<Tensor>,
}

fn check_embedding(e: &Tensor, what: &'static str) -> Result<Tensor> {
    if e.rank() != 1 {
        return Err(Error::Shape(format!("{what} must be a vector, got {:?}", e.dims())));
    }
    let e = e.to_dtype(candle_core::DType::F64)?.detach();
    let v = e.to_vec1::<f64>()?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    if v.iter().all(|x| *x == 0.0) {
        return Err(Error::ZeroNorm(what));
    }
    Ok(e)
}

impl TextCondition {
    pub fn new(
        shape_prompt: impl Into<String>,
        shape_embedding: Tensor,
        color: Option<(String, Tensor)>,
    ) -> Result<Self> {
        let shape_embedding = check_embedding(&shape_embedding, "shape embedding")?;
        let (color_prompt, color_embedding) = match color {
            Some((prompt, e)) => {
                let e = check_embedding(&e, "color embedding")?;
                if e.dims() != shape_embedding.dims() {
                    return Err(Error::Shape(format!(
                        "color embedding {:?} differs from shape embedding {:?}",
                        e.dims(),
                        shape_embedding.dims()
                    )));
                }
                (Some(prompt), Some(e))
            }
            None => (None, None),
        };
        Ok(TextCondition {
            shape_prompt: shape_prompt.into(),
            color_prompt,
            shape_embedding,
            color_embedding,
        })
    }

    /// Embeds both prompts with `encoder`.
    pub fn encode(shape: &str, color: Option<&str>, encoder: &dyn JointEncoder) -> Result<Self> {
        let shape_embedding = encoder.encode_text(shape)?;
        let color = match color {
            Some(c) => Some((c.to_string(), encoder.encode_text(c)?)),
            None => None,
        };
        TextCondition::new(shape, shape_embedding, color)
    }

    pub fn shape_prompt(&self) -> &str {
        &self.shape_prompt
    }

    pub fn color_prompt(&self) -> Option<&str> {
        self.color_prompt.as_deref()
    }

    pub fn shape_embedding(&self) -> &Tensor {
        &self.shape_embedding
    }

    pub fn color_embedding(&self) -> Option<&Tensor> {
        self.color_embedding.as_ref()
    }

    pub fn embed_dim(&self) -> usize {
        self.shape_embedding.dims()[0]
    }
}
