use crate::error::{Error, Result};
use crate::lm::{BaseModel, Tokenizer};

/// Mean-pools the frozen base model's final hidden states.
#[derive(Clone, Copy)]
pub struct EmbeddingProvider<'a> {
    model: &'a BaseModel,
}

impl<'a> EmbeddingProvider<'a> {
    pub fn new(model: &'a BaseModel) -> Self {
        Self { model }
    }

    pub fn dim(&self) -> usize {
        self.model.config().d_model
    }

    /// Embeds the first `context_len` tokens of a non-empty document.
    pub fn embed(&self, doc: &[u8]) -> Result<Vec<f64>> {
        if doc.is_empty() {
            return Err(Error::EmptyDocument);
        }
        let mut tokens = Tokenizer.encode(doc);
        tokens.truncate(self.model.config().context_len);
        self.embed_tokens(&tokens)
    }

    /// Embeds the context half of a document, the prefix that force decoding
    /// conditions on. Retriever fitting and evaluation queries both use this view.
    pub fn embed_prompt(&self, doc: &[u8]) -> Result<Vec<f64>> {
        if doc.is_empty() {
            return Err(Error::EmptyDocument);
        }
        let mut tokens = Tokenizer.encode(doc);
        tokens.truncate(self.model.config().context_len);
        let context = tokens.len().div_ceil(2);
        self.embed_tokens(&tokens[..context])
    }

    /// Embeds free query text as a prompt: `[BOS] + bytes`, without the end
    /// marker, clipped to the context.
    pub fn embed_query(&self, text: &[u8]) -> Result<Vec<f64>> {
        if text.is_empty() {
            return Err(Error::EmptyDocument);
        }
        let mut tokens = vec![Tokenizer::BOS];
        tokens.extend(text.iter().map(|&b| u32::from(b)));
        tokens.truncate(self.model.config().context_len);
        self.embed_tokens(&tokens)
    }

    pub fn embed_tokens(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::EmptyDocument);
        }
        let hidden = self.model.hidden_states(tokens)?;
        let (n, d) = hidden.dims2()?;
        let mut pooled = vec![0.0f64; d];
        for row in hidden.data().chunks_exact(d) {
            pooled.iter_mut().zip(row).for_each(|(p, &h)| *p += f64::from(h));
        }
        pooled.iter_mut().for_each(|p| *p /= n as f64);
        if pooled.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(pooled)
    }
}
