use rand::Rng;

use super::{add_norm, AttentionConfig, FeedForward, ForwardCtx, LayerNormParams, MultiHeadAttention};
use crate::error::{MsctError, Result};
use crate::tensor::{AttnMask, Graph, ParamId, ParamStore, Var};

/// Masked self-attention, Add&Norm, feed-forward, Add&Norm.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNormParams,
    pub ffn: FeedForward,
    pub norm2: LayerNormParams,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        attn: AttentionConfig,
        d_ff: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let cfg = AttentionConfig { causal: true, ..attn };
        Ok(EncoderBlock {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), cfg, rng)?,
            norm1: LayerNormParams::new(store, &format!("{name}.norm1"), attn.d_h),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), attn.d_h, d_ff, rng),
            norm2: LayerNormParams::new(store, &format!("{name}.norm2"), attn.d_h),
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.self_attn.params();
        p.extend(self.norm1.params());
        p.extend(self.ffn.params());
        p.extend(self.norm2.params());
        p
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let a = self.self_attn.forward(g, store, h, None, None, ctx)?;
        let a = ctx.apply_seq(g, a)?;
        let h = add_norm(g, store, &self.norm1, h, a)?;
        let f = self.ffn.forward(g, store, h)?;
        let f = ctx.apply_seq(g, f)?;
        add_norm(g, store, &self.norm2, h, f)
    }
}

/// Encoder block with cross-attention on the encoder representation inserted
/// after the self-attention sublayer.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNormParams,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNormParams,
    pub ffn: FeedForward,
    pub norm3: LayerNormParams,
}

impl DecoderBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        attn: AttentionConfig,
        d_ff: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let self_cfg = AttentionConfig { causal: true, ..attn };
        let cross_cfg = AttentionConfig { causal: false, ..attn };
        Ok(DecoderBlock {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), self_cfg, rng)?,
            norm1: LayerNormParams::new(store, &format!("{name}.norm1"), attn.d_h),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), cross_cfg, rng)?,
            norm2: LayerNormParams::new(store, &format!("{name}.norm2"), attn.d_h),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), attn.d_h, d_ff, rng),
            norm3: LayerNormParams::new(store, &format!("{name}.norm3"), attn.d_h),
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.self_attn.params();
        p.extend(self.norm1.params());
        p.extend(self.cross_attn.params());
        p.extend(self.norm2.params());
        p.extend(self.ffn.params());
        p.extend(self.norm3.params());
        p
    }

    /// `phi_mask` restricts which encoder positions each batch row may read.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h: Var,
        phi: Option<Var>,
        phi_mask: Option<&AttnMask>,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let phi = phi.ok_or_else(|| MsctError::Usage("decoder block needs the encoder representation".into()))?;
        let a = self.self_attn.forward(g, store, h, None, None, ctx)?;
        let a = ctx.apply_seq(g, a)?;
        let h = add_norm(g, store, &self.norm1, h, a)?;
        let x = self.cross_attn.forward(g, store, h, Some(phi), phi_mask, ctx)?;
        let x = ctx.apply_seq(g, x)?;
        let h = add_norm(g, store, &self.norm2, h, x)?;
        let f = self.ffn.forward(g, store, h)?;
        let f = ctx.apply_seq(g, f)?;
        add_norm(g, store, &self.norm3, h, f)
    }
}
