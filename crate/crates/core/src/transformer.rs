//! Pre-norm transformer encoder and the trainable encoding tables.

use rand::Rng;
use tdfn_tensor::{attention_forward, AttnLayout, Element, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::params::{normal_table, Activation, Bound, Linear, Norm, ParamId, ParamStore};

/// Standard deviation of the normal initialisation of encoding tables.
pub const TABLE_INIT_STD: f32 = 0.02;

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn_norm: Norm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub proj: Linear,
    pub ff_norm: Norm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl EncoderLayer {
    fn new(store: &mut ParamStore, name: &str, dim: usize, ff_dim: usize, rng: &mut impl Rng) -> Self {
        EncoderLayer {
            attn_norm: Norm::new(store, &format!("{name}.attn_norm"), dim),
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, rng),
            ff_norm: Norm::new(store, &format!("{name}.ff_norm"), dim),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), dim, ff_dim, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), ff_dim, dim, rng),
        }
    }
}

/// Stack of encoder layers followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub layers: Vec<EncoderLayer>,
    pub final_norm: Norm,
    pub heads: usize,
    pub dim: usize,
}

impl EncoderStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        layers: usize,
        heads: usize,
        dim: usize,
        ff_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = (0..layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}.layer{i}"), dim, ff_dim, rng))
            .collect();
        EncoderStack {
            layers,
            final_norm: Norm::new(store, &format!("{name}.final_norm"), dim),
            heads,
            dim,
        }
    }

    /// Encodes `batch` independent sequences of `seq` tokens stored as
    /// consecutive rows of `x: [batch·seq, dim]`.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, batch: usize, seq: usize) -> Result<Var> {
        self.run(tape, p, x, batch, seq, None)
    }

    fn run<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        mut x: Var,
        batch: usize,
        seq: usize,
        mut weights: Option<&mut Vec<Vec<T>>>,
    ) -> Result<Var> {
        if tape.shape(x) != [batch * seq, self.dim] {
            return Err(Error::InputShape {
                expected: format!("[{}, {}] token", batch * seq, self.dim),
                got: tape.shape(x).to_vec(),
            });
        }
        let layout = AttnLayout {
            batch,
            seq,
            heads: self.heads,
            dim: self.dim,
        };
        for layer in &self.layers {
            let h = layer.attn_norm.forward(tape, p, x)?;
            let q = layer.query.forward(tape, p, h)?;
            let k = layer.key.forward(tape, p, h)?;
            let v = layer.value.forward(tape, p, h)?;
            if let Some(w) = weights.as_deref_mut() {
                w.push(attention_forward(tape.data(q), tape.data(k), tape.data(v), layout).1);
            }
            let a = tape.attention(q, k, v, layout)?;
            let a = layer.proj.forward(tape, p, a)?;
            x = tape.add(x, a)?;

            let h = layer.ff_norm.forward(tape, p, x)?;
            let h = layer.ff_in.forward(tape, p, h)?;
            let h = Activation::Gelu.apply(tape, h);
            let h = layer.ff_out.forward(tape, p, h)?;
            x = tape.add(x, h)?;
        }
        self.final_norm.forward(tape, p, x)
    }

    /// Untaped encoding of a single `[seq, dim]` token sequence.
    pub fn encode(&self, store: &ParamStore, tokens: &Tensor) -> Result<Tensor> {
        let (out, _) = self.encode_with_weights(store, tokens)?;
        Ok(out)
    }

    /// Like [`encode`](Self::encode), also returning each layer's attention
    /// weights laid out `[heads, seq, seq]`.
    pub fn encode_with_weights(&self, store: &ParamStore, tokens: &Tensor) -> Result<(Tensor, Vec<Vec<f32>>)> {
        let seq = match tokens.shape() {
            [s, d] if *d == self.dim => *s,
            s => {
                return Err(Error::InputShape {
                    expected: format!("[seq, {}] token", self.dim),
                    got: s.to_vec(),
                })
            }
        };
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| false);
        let x = tape.constant(tokens.clone());
        let mut weights = Vec::new();
        let y = self.run(&mut tape, &p, x, 1, seq, Some(&mut weights))?;
        Ok((tape.value(y).clone(), weights))
    }
}

/// One trainable vector per position slot of a channel.
#[derive(Clone, Copy, Debug)]
pub struct PositionalTable {
    pub table: ParamId,
    pub len: usize,
}

impl PositionalTable {
    pub fn new(store: &mut ParamStore, name: &str, len: usize, dim: usize, rng: &mut impl Rng) -> Self {
        PositionalTable {
            table: normal_table(store, name, len, dim, TABLE_INIT_STD, rng),
            len,
        }
    }

    /// Adds entry `positions[i]` to row `i` of `tokens`.
    pub fn add<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, tokens: Var, positions: &[usize]) -> Result<Var> {
        if let Some(&bad) = positions.iter().find(|&&i| i >= self.len) {
            return Err(Error::Position {
                position: bad,
                len: self.len,
            });
        }
        let rows = tape.gather_rows(p[self.table], positions)?;
        Ok(tape.add(tokens, rows)?)
    }
}

/// One trainable vector per channel: id 0 is the low-resolution channel,
/// id `1 + r` the high-resolution channel of region `r`.
#[derive(Clone, Copy, Debug)]
pub struct ChannelTable {
    pub table: ParamId,
    pub len: usize,
}

impl ChannelTable {
    pub fn new(store: &mut ParamStore, name: &str, len: usize, dim: usize, rng: &mut impl Rng) -> Self {
        ChannelTable {
            table: normal_table(store, name, len, dim, TABLE_INIT_STD, rng),
            len,
        }
    }

    /// Adds entry `channels[i]` to row `i` of `tokens`.
    pub fn add<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, tokens: Var, channels: &[usize]) -> Result<Var> {
        if let Some(&bad) = channels.iter().find(|&&c| c >= self.len) {
            return Err(Error::Channel {
                channel: bad,
                channels: self.len,
            });
        }
        let rows = tape.gather_rows(p[self.table], channels)?;
        Ok(tape.add(tokens, rows)?)
    }
}

/// Untaped `tokens + table[positions[i]]` row by row.
pub fn add_positional(store: &ParamStore, table: &PositionalTable, tokens: &Tensor, positions: &[usize]) -> Result<Tensor> {
    add_rows(store, tokens, |tape, p, x| table.add(tape, p, x, positions))
}

/// Untaped `tokens + table[channel]` applied to every row.
pub fn add_channel(store: &ParamStore, table: &ChannelTable, tokens: &Tensor, channel: usize) -> Result<Tensor> {
    let rows = tokens.shape()[0];
    add_rows(store, tokens, |tape, p, x| table.add(tape, p, x, &vec![channel; rows]))
}

fn add_rows(
    store: &ParamStore,
    tokens: &Tensor,
    f: impl FnOnce(&mut Tape, &Bound, Var) -> Result<Var>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, |_| false);
    let x = tape.constant(tokens.clone());
    let y = f(&mut tape, &p, x)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stack(layers: usize, heads: usize) -> (ParamStore, EncoderStack) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let s = EncoderStack::new(&mut store, "enc", layers, heads, 32, 128, &mut rng);
        (store, s)
    }

    fn tokens(seq: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..seq * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(&[seq, 32], data).unwrap()
    }

    #[test]
    fn shape_is_preserved() {
        let (store, s) = stack(6, 4);
        let y = s.encode(&store, &tokens(16, 0)).unwrap();
        assert_eq!(y.shape(), &[16, 32]);
    }

    #[test]
    fn single_token_attends_to_itself() {
        let (store, s) = stack(2, 4);
        let (_, weights) = s.encode_with_weights(&store, &tokens(1, 1)).unwrap();
        for layer in weights {
            assert_eq!(layer, vec![1.0; 4]);
        }
    }

    #[test]
    fn wrong_token_width_is_rejected() {
        let (store, s) = stack(1, 4);
        let bad = Tensor::zeros(&[3, 16]).unwrap();
        assert!(matches!(s.encode(&store, &bad), Err(Error::InputShape { .. })));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let (store, s) = stack(3, 4);
        let seq = 7;
        let (_, weights) = s.encode_with_weights(&store, &tokens(seq, 2)).unwrap();
        for layer in weights {
            for row in layer.chunks(seq) {
                let total: f64 = row.iter().map(|&x| x as f64).sum();
                assert!((total - 1.0).abs() <= 1e-6);
                assert!(row.iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn positional_indexing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let table = PositionalTable::new(&mut store, "pos", 4, 32, &mut rng);
        let x = Tensor::zeros(&[2, 32]).unwrap();
        let y = add_positional(&store, &table, &x, &[3, 1]).unwrap();
        let entries = store.get(table.table);
        assert_eq!(y.row(0), entries.row(3));
        assert_eq!(y.row(1), entries.row(1));
        let swapped = add_positional(&store, &table, &x, &[1, 3]).unwrap();
        assert_eq!(swapped.row(0), entries.row(1));
        assert!(matches!(
            add_positional(&store, &table, &x, &[4, 0]),
            Err(Error::Position { position: 4, .. })
        ));
    }

    #[test]
    fn zero_tables_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let pos = PositionalTable::new(&mut store, "pos", 4, 32, &mut rng);
        let chan = ChannelTable::new(&mut store, "chan", 17, 32, &mut rng);
        store.set(pos.table, vec![0.0; 4 * 32]).unwrap();
        store.set(chan.table, vec![0.0; 17 * 32]).unwrap();
        let x = tokens(3, 9);
        assert_eq!(add_positional(&store, &pos, &x, &[0, 1, 2]).unwrap().data(), x.data());
        assert_eq!(add_channel(&store, &chan, &x, 5).unwrap().data(), x.data());
    }

    #[test]
    fn channel_entries_shared_within_region_distinct_across() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let chan = ChannelTable::new(&mut store, "chan", 17, 32, &mut rng);
        let x = Tensor::zeros(&[2, 32]).unwrap();
        let a = add_channel(&store, &chan, &x, 1 + 3).unwrap();
        let b = add_channel(&store, &chan, &x, 1 + 3).unwrap();
        let c = add_channel(&store, &chan, &x, 1 + 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.row(0), a.row(1));
        assert_ne!(a.row(0), c.row(0));
        assert!(matches!(
            add_channel(&store, &chan, &x, 17),
            Err(Error::Channel { channel: 17, .. })
        ));
    }
}
