use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::{AttnIdx, BlockIdx, Family, LnIdx, Model, LN_EPS};
use crate::error::{Error, Result};
use crate::tensor::{AttentionBlock, AttentionLayout, AttentionMask, Dropout, Float, Tape, Tensor, Var};

/// Projection weights of one attention sublayer, as tape vars.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl AttentionParams {
    fn bind(idx: &AttnIdx, pv: &[Var]) -> Self {
        Self {
            wq: pv[idx.wq],
            bq: pv[idx.bq],
            wk: pv[idx.wk],
            bk: pv[idx.bk],
            wv: pv[idx.wv],
            bv: pv[idx.bv],
            wo: pv[idx.wo],
            bo: pv[idx.bo],
        }
    }
}

/// Keys and values of every position a decoder layer has consumed so far,
/// row-major `[len × d_model]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerCache<T> {
    pub k: Vec<T>,
    pub v: Vec<T>,
}

/// Encoder output projected once into each decoder layer's cross-attention
/// keys and values.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderMemory<T> {
    pub len: usize,
    pub keys: Vec<Vec<T>>,
    pub values: Vec<Vec<T>>,
}

/// Dropout probability plus the generator, if this pass is stochastic.
struct Noise<'r> {
    p: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl Noise<'_> {
    fn draw(&mut self) -> Option<Dropout<'_>> {
        let p = self.p;
        if p <= 0.0 {
            return None;
        }
        self.rng.as_deref_mut().map(|rng| Dropout { p, rng })
    }
}

fn linear<T: Float>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

fn norm<T: Float>(tape: &mut Tape<T>, x: Var, ln: &LnIdx, pv: &[Var]) -> Result<Var> {
    tape.layer_norm(x, pv[ln.g], pv[ln.b], LN_EPS)
}

/// Projects queries from `xq` and keys/values from `xkv`, attends per head
/// under `layout`, and applies the output projection.
pub fn multi_head_attention<T: Float>(
    tape: &mut Tape<T>,
    p: &AttentionParams,
    xq: Var,
    xkv: Var,
    layout: &Arc<AttentionLayout>,
    heads: usize,
    dropout: Option<Dropout<'_>>,
) -> Result<Var> {
    let q = linear(tape, xq, p.wq, p.bq)?;
    let k = linear(tape, xkv, p.wk, p.bk)?;
    let v = linear(tape, xkv, p.wv, p.bv)?;
    let a = tape.attention(q, k, v, layout, heads, dropout)?;
    linear(tape, a, p.wo, p.bo)
}

/// Cross-attention inputs for one decoder layer: layout plus projected memory.
struct Cross<'a> {
    layout: &'a Arc<AttentionLayout>,
    k: Var,
    v: Var,
}

/// Concatenates sequences into one matrix; returns ids, per-row positions and
/// the start row of each sequence.
fn pack(seqs: &[&[usize]], max_positions: usize) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut starts = Vec::with_capacity(seqs.len());
    for s in seqs {
        if s.is_empty() {
            return Err(Error::contract("cannot run the model on an empty sequence"));
        }
        if s.len() > max_positions {
            return Err(Error::Length {
                len: s.len(),
                max: max_positions,
            });
        }
        starts.push(ids.len());
        ids.extend_from_slice(s);
        positions.extend(0..s.len());
    }
    Ok((ids, positions, starts))
}

fn self_layout(seqs: &[&[usize]], starts: &[usize], causal: bool) -> Result<Arc<AttentionLayout>> {
    let blocks = seqs
        .iter()
        .zip(starts)
        .map(|(s, &start)| AttentionBlock {
            q_start: start,
            k_start: start,
            mask: if causal {
                AttentionMask::causal(s.len())
            } else {
                AttentionMask::full(s.len(), s.len())
            },
        })
        .collect();
    let n = seqs.iter().map(|s| s.len()).sum();
    Ok(Arc::new(AttentionLayout::new(blocks, n, n)?))
}

impl<T: Float> Model<T> {
    fn embed(&self, tape: &mut Tape<T>, pv: &[Var], ids: &[usize], positions: &[usize], noise: &mut Noise<'_>) -> Result<Var> {
        let max = self.config.max_positions;
        if let Some(&p) = positions.iter().find(|&&p| p >= max) {
            return Err(Error::Length { len: p + 1, max });
        }
        let tok = tape.embedding(pv[self.index.tok], ids)?;
        let tok = tape.scale(tok, T::lit((self.config.d_model as f64).sqrt()));
        let pos = tape.embedding(pv[self.index.pos], positions)?;
        let x = tape.add(tok, pos)?;
        Ok(tape.dropout(x, noise.draw()))
    }

    fn output(&self, tape: &mut Tape<T>, pv: &[Var], x: Var) -> Result<Var> {
        let h = norm(tape, x, &self.index.ln_f, pv)?;
        let table = pv[self.index.out.unwrap_or(self.index.tok)];
        tape.matmul_t(h, table)
    }

    /// One pre-norm block. Returns the block output and the self-attention
    /// keys/values covering `past` plus the new rows.
    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        tape: &mut Tape<T>,
        pv: &[Var],
        b: &BlockIdx,
        x: Var,
        layout: &Arc<AttentionLayout>,
        past: Option<&LayerCache<T>>,
        cross: Option<Cross<'_>>,
        noise: &mut Noise<'_>,
    ) -> Result<(Var, Var, Var)> {
        let heads = self.config.n_heads;
        let d = self.config.d_model;
        let p = AttentionParams::bind(&b.attn, pv);
        let h = norm(tape, x, &b.ln_attn, pv)?;
        let q = linear(tape, h, p.wq, p.bq)?;
        let mut k = linear(tape, h, p.wk, p.bk)?;
        let mut v = linear(tape, h, p.wv, p.bv)?;
        if let Some(past) = past {
            let rows = past.k.len() / d;
            let pk = tape.constant(vec![rows, d], past.k.clone())?;
            let pvv = tape.constant(vec![rows, d], past.v.clone())?;
            k = tape.concat_rows(pk, k)?;
            v = tape.concat_rows(pvv, v)?;
        }
        let a = tape.attention(q, k, v, layout, heads, noise.draw())?;
        let a = linear(tape, a, p.wo, p.bo)?;
        let mut x = tape.add(x, a)?;

        match (cross, &b.cross) {
            (Some(c), Some((ln, idx))) => {
                let cp = AttentionParams::bind(idx, pv);
                let h = norm(tape, x, ln, pv)?;
                let q = linear(tape, h, cp.wq, cp.bq)?;
                let a = tape.attention(q, c.k, c.v, c.layout, heads, noise.draw())?;
                let a = linear(tape, a, cp.wo, cp.bo)?;
                x = tape.add(x, a)?;
            }
            (Some(_), None) => {
                return Err(Error::contract("encoder memory supplied to a block without cross-attention"));
            }
            (None, Some(_)) => {
                return Err(Error::contract("cross-attention block needs encoder memory"));
            }
            (None, None) => {}
        }

        let h = norm(tape, x, &b.ln_ffn, pv)?;
        let f = linear(tape, h, pv[b.ffn.w1], pv[b.ffn.b1])?;
        let f = tape.gelu(f);
        let f = tape.dropout(f, noise.draw());
        let f = linear(tape, f, pv[b.ffn.w2], pv[b.ffn.b2])?;
        let x = tape.add(x, f)?;
        Ok((x, k, v))
    }

    fn cross_kv(&self, tape: &mut Tape<T>, pv: &[Var], b: &BlockIdx, memory: Var) -> Result<(Var, Var)> {
        let (_, idx) = b.cross.as_ref().ok_or_else(|| Error::contract("block has no cross-attention"))?;
        let p = AttentionParams::bind(idx, pv);
        Ok((linear(tape, memory, p.wk, p.bk)?, linear(tape, memory, p.wv, p.bv)?))
    }

    fn require(&self, family: Family) -> Result<()> {
        if self.config.family != family {
            return Err(Error::contract(format!(
                "operation needs a {family} model, this one is {}",
                self.config.family
            )));
        }
        Ok(())
    }

    /// Next-token logits for a packed batch of decoder-only sequences.
    ///
    /// Row `r` of the `[Σ len × vocab]` result scores the token following row
    /// `r`'s input token within its own sequence. Passing `rng` enables dropout.
    pub fn lm_logits(&self, tape: &mut Tape<T>, pv: &[Var], seqs: &[&[usize]], rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        self.require(Family::DecoderOnly)?;
        let mut noise = Noise {
            p: self.config.dropout,
            rng,
        };
        let (ids, positions, starts) = pack(seqs, self.config.max_positions)?;
        let layout = self_layout(seqs, &starts, true)?;
        let mut x = self.embed(tape, pv, &ids, &positions, &mut noise)?;
        for b in &self.index.dec {
            x = self.block(tape, pv, b, x, &layout, None, None, &mut noise)?.0;
        }
        self.output(tape, pv, x)
    }

    /// Encodes a packed batch of sources with bidirectional self-attention.
    /// Returns the final-normed representations and each source's start row.
    fn encode_packed(&self, tape: &mut Tape<T>, pv: &[Var], srcs: &[&[usize]], noise: &mut Noise<'_>) -> Result<(Var, Vec<usize>)> {
        let (ids, positions, starts) = pack(srcs, self.config.max_positions)?;
        let layout = self_layout(srcs, &starts, false)?;
        let mut x = self.embed(tape, pv, &ids, &positions, noise)?;
        for b in &self.index.enc {
            x = self.block(tape, pv, b, x, &layout, None, None, noise)?.0;
        }
        let ln = self.index.enc_ln.as_ref().expect("encoder-decoder has an encoder norm");
        Ok((norm(tape, x, ln, pv)?, starts))
    }

    /// Decoder logits for a packed batch of (source, decoder input) pairs.
    pub fn encdec_logits(
        &self,
        tape: &mut Tape<T>,
        pv: &[Var],
        srcs: &[&[usize]],
        tgts: &[&[usize]],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        self.require(Family::EncoderDecoder)?;
        if srcs.len() != tgts.len() {
            return Err(Error::contract(format!("{} sources for {} targets", srcs.len(), tgts.len())));
        }
        let mut noise = Noise {
            p: self.config.dropout,
            rng,
        };
        let (memory, src_starts) = self.encode_packed(tape, pv, srcs, &mut noise)?;
        let (ids, positions, starts) = pack(tgts, self.config.max_positions)?;
        let layout = self_layout(tgts, &starts, true)?;
        let cross_blocks = tgts
            .iter()
            .zip(srcs)
            .zip(starts.iter().zip(&src_starts))
            .map(|((t, s), (&qs, &ks))| AttentionBlock {
                q_start: qs,
                k_start: ks,
                mask: AttentionMask::full(t.len(), s.len()),
            })
            .collect();
        let cross_layout = Arc::new(AttentionLayout::new(
            cross_blocks,
            ids.len(),
            srcs.iter().map(|s| s.len()).sum(),
        )?);
        let mut x = self.embed(tape, pv, &ids, &positions, &mut noise)?;
        for b in &self.index.dec {
            let (k, v) = self.cross_kv(tape, pv, b, memory)?;
            let cross = Cross {
                layout: &cross_layout,
                k,
                v,
            };
            x = self.block(tape, pv, b, x, &layout, None, Some(cross), &mut noise)?.0;
        }
        self.output(tape, pv, x)
    }

    /// One decoder block applied to `x` (`[T × d_model]`) under `mask`, with an
    /// optional encoder memory (`[S × d_model]`) for the cross-attention
    /// sublayer. Supplying memory to a decoder-only model is an error.
    pub fn decoder_layer(
        &self,
        tape: &mut Tape<T>,
        pv: &[Var],
        layer: usize,
        x: Var,
        mask: &AttentionMask,
        memory: Option<Var>,
    ) -> Result<Var> {
        let b = self.index.dec.get(layer).ok_or(Error::Index {
            what: "decoder layer",
            index: layer,
            bound: self.index.dec.len(),
        })?;
        let layout = Arc::new(AttentionLayout::single(mask.clone())?);
        let mut noise = Noise { p: 0.0, rng: None };
        let (cross_layout, kv) = match memory {
            Some(m) => {
                if self.config.family == Family::DecoderOnly {
                    return Err(Error::contract("decoder-only layers take no encoder memory"));
                }
                let s = tape.shape(m)[0];
                let layout = Arc::new(AttentionLayout::single(AttentionMask::full(mask.rows(), s))?);
                (Some(layout), Some(self.cross_kv(tape, pv, b, m)?))
            }
            None => (None, None),
        };
        let cross = match (&cross_layout, kv) {
            (Some(layout), Some((k, v))) => Some(Cross { layout, k, v }),
            _ => None,
        };
        Ok(self.block(tape, pv, b, x, &layout, None, cross, &mut noise)?.0)
    }

    /// Full-sequence decoder-only logits `[T × vocab]` without gradients.
    pub fn lm4mt_forward(&self, ids: &[usize]) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let pv = self.bind(&mut tape);
        let out = self.lm_logits(&mut tape, &pv, &[ids], None)?;
        Ok(tape.to_tensor(out))
    }

    /// Encoder-decoder logits `[T × vocab]` for decoder input `tgt_in`.
    pub fn encdec_forward(&self, src: &[usize], tgt_in: &[usize]) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let pv = self.bind(&mut tape);
        let out = self.encdec_logits(&mut tape, &pv, &[src], &[tgt_in], None)?;
        Ok(tape.to_tensor(out))
    }

    /// Runs the encoder once and projects its output into every decoder
    /// layer's cross-attention keys and values.
    pub fn encode_memory(&self, src: &[usize]) -> Result<EncoderMemory<T>> {
        self.require(Family::EncoderDecoder)?;
        let mut tape = Tape::inference();
        let pv = self.bind(&mut tape);
        let mut noise = Noise { p: 0.0, rng: None };
        let (memory, _) = self.encode_packed(&mut tape, &pv, &[src], &mut noise)?;
        let mut keys = Vec::with_capacity(self.index.dec.len());
        let mut values = Vec::with_capacity(self.index.dec.len());
        for b in &self.index.dec {
            let (k, v) = self.cross_kv(&mut tape, &pv, b, memory)?;
            keys.push(tape.value(k).to_vec());
            values.push(tape.value(v).to_vec());
        }
        Ok(EncoderMemory {
            len: src.len(),
            keys,
            values,
        })
    }

    /// Feeds `new_ids` after the `caches`' current contents, appends their keys
    /// and values, and returns next-token logits for each new row
    /// (`[new_ids.len() × vocab]`, row-major).
    ///
    /// `memory` is required for the encoder-decoder family and rejected for the
    /// decoder-only one.
    pub fn extend(&self, caches: &mut Vec<LayerCache<T>>, memory: Option<&EncoderMemory<T>>, new_ids: &[usize]) -> Result<Vec<T>> {
        if new_ids.is_empty() {
            return Err(Error::contract("extend needs at least one token"));
        }
        match (self.config.family, memory) {
            (Family::DecoderOnly, Some(_)) => return Err(Error::contract("decoder-only models take no encoder memory")),
            (Family::EncoderDecoder, None) => return Err(Error::contract("encoder-decoder decoding needs encoder memory")),
            _ => {}
        }
        let d = self.config.d_model;
        let depth = self.index.dec.len();
        if caches.is_empty() {
            caches.resize(depth, LayerCache::default());
        }
        if caches.len() != depth {
            return Err(Error::contract(format!("{} caches for {depth} layers", caches.len())));
        }
        let len = caches[0].k.len() / d;
        let total = len + new_ids.len();
        if total > self.config.max_positions {
            return Err(Error::Length {
                len: total,
                max: self.config.max_positions,
            });
        }

        let mut tape = Tape::inference();
        let pv = self.bind(&mut tape);
        let mut noise = Noise { p: 0.0, rng: None };
        let positions: Vec<usize> = (len..total).collect();
        let mut x = self.embed(&mut tape, &pv, new_ids, &positions, &mut noise)?;
        let layout = Arc::new(AttentionLayout::single(AttentionMask::causal_offset(new_ids.len(), total)?)?);
        let cross_layout = match memory {
            Some(m) => Some(Arc::new(AttentionLayout::single(AttentionMask::full(new_ids.len(), m.len))?)),
            None => None,
        };
        let mut updated = Vec::with_capacity(depth);
        for (i, b) in self.index.dec.iter().enumerate() {
            let cross = match (memory, &cross_layout) {
                (Some(m), Some(layout)) => Some(Cross {
                    layout,
                    k: tape.constant(vec![m.len, d], m.keys[i].clone())?,
                    v: tape.constant(vec![m.len, d], m.values[i].clone())?,
                }),
                _ => None,
            };
            let (out, k, v) = self.block(&mut tape, &pv, b, x, &layout, Some(&caches[i]), cross, &mut noise)?;
            updated.push(LayerCache {
                k: tape.value(k).to_vec(),
                v: tape.value(v).to_vec(),
            });
            x = out;
        }
        let logits = self.output(&mut tape, &pv, x)?;
        *caches = updated;
        Ok(tape.value(logits).to_vec())
    }
}
