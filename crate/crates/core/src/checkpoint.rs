//! Self-describing binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "BUNCKPT1"
//! version   u32
//! config    u64 length + UTF-8 text of the run configuration
//! counters  u64 environment steps, u64 optimizer steps
//! layers    u64 count, then per layer:
//!             u64 agents, u64 × agents input sizes, u64 × agents output sizes
//!             u64 rows, u64 cols, packed mask bits (row-major, LSB first)
//!             f64 × nnz active weights in row-major order, f64 × rows biases
//! ledger    u64 budget, u64 count, then (u64 step, u64 layer, u64 row, u64 col, f64 |grad|)
//! rng       4 × ([u8; 32] seed, u64 stream, u128 word position)
//! crc32     u32 over every preceding byte
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{parse_config, RunConfig};
use crate::error::{Error, Result};
use crate::numerics::{BitMask, MaskedLinear, Matrix, QNetwork};
use crate::scheduler::{RngStreams, Trainer};
use crate::topology::{AgentPartition, GrowthLedger, GrowthRecord};

pub const MAGIC: &[u8; 8] = b"BUNCKPT1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub optimizer_step: u64,
    pub network: QNetwork,
    pub ledger: GrowthLedger,
    pub rng: RngStreams,
}

impl Checkpoint {
    pub fn from_trainer(config: &RunConfig, trainer: &Trainer) -> Self {
        Self {
            config: config.clone(),
            step: trainer.step_count(),
            optimizer_step: trainer.optimizer().step,
            network: trainer.online().clone(),
            ledger: trainer.ledger().clone(),
            rng: trainer.rng().clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        let text = self.config.to_string();
        put_u64(&mut w, text.len() as u64);
        w.extend_from_slice(text.as_bytes());
        put_u64(&mut w, self.step);
        put_u64(&mut w, self.optimizer_step);

        let net = &self.network;
        put_u64(&mut w, net.num_layers() as u64);
        for (layer, split) in net.layers().iter().zip(net.partition().layers()) {
            put_u64(&mut w, split.in_sizes().len() as u64);
            for &s in split.in_sizes().iter().chain(split.out_sizes()) {
                put_u64(&mut w, s as u64);
            }
            let mask = layer.mask();
            put_u64(&mut w, mask.rows() as u64);
            put_u64(&mut w, mask.cols() as u64);
            w.extend_from_slice(&pack_bits(mask.bits()));
            for (&on, &v) in mask.bits().iter().zip(layer.weights().as_slice()) {
                if on {
                    put_f64(&mut w, v);
                }
            }
            for &b in layer.bias() {
                put_f64(&mut w, b);
            }
        }

        put_u64(&mut w, self.ledger.budget() as u64);
        put_u64(&mut w, self.ledger.len() as u64);
        for r in self.ledger.records() {
            for v in [r.step, r.layer as u64, r.row as u64, r.col as u64] {
                put_u64(&mut w, v);
            }
            put_f64(&mut w, r.magnitude);
        }

        for rng in self.rng.all() {
            w.extend_from_slice(&rng.get_seed());
            put_u64(&mut w, rng.get_stream());
            w.extend_from_slice(&rng.get_word_pos().to_le_bytes());
        }
        let crc = crc32fast::hash(&w);
        w.extend_from_slice(&crc.to_le_bytes());
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint(
                "not a checkpoint (bad magic bytes)".into(),
            ));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("length checked"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (this build reads version {VERSION})"
            )));
        }
        if bytes.len() < 16 {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("four bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint(
                "checksum mismatch (file is corrupt or truncated)".into(),
            ));
        }

        let mut r = Reader { buf: body, pos: 12 };
        let text_len = r.len()?;
        let text = std::str::from_utf8(r.bytes(text_len)?)
            .map_err(|_| Error::Checkpoint("configuration text is not UTF-8".into()))?;
        let config = parse_config(text)?;
        let step = r.u64()?;
        let optimizer_step = r.u64()?;

        let n_layers = r.len()?;
        let mut splits = Vec::with_capacity(n_layers);
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let agents = r.len()?;
            let ins = (0..agents).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let outs = (0..agents).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let rows = r.len()?;
            let cols = r.len()?;
            let cells = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Checkpoint("layer dimensions overflow".into()))?;
            let bits = unpack_bits(r.bytes(cells.div_ceil(8))?, cells);
            let mut weights = vec![0.0; cells];
            for (w, &on) in weights.iter_mut().zip(&bits) {
                if on {
                    *w = r.f64()?;
                }
            }
            let bias = (0..rows).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let mask = BitMask::from_bits(rows, cols, bits)?;
            layers.push(MaskedLinear::new(
                Matrix::from_vec(rows, cols, weights)?,
                mask,
                bias,
            )?);
            splits.push((ins, outs));
        }
        let partition = AgentPartition::new(splits)?;
        let network = QNetwork::from_layers(partition, layers)?;

        let budget = r.len()?;
        let count = r.len()?;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            records.push(GrowthRecord {
                step: r.u64()?,
                layer: r.len()?,
                row: r.len()?,
                col: r.len()?,
                magnitude: r.f64()?,
            });
        }
        let ledger = GrowthLedger::from_records(budget, records)?;

        let mut streams = Vec::with_capacity(4);
        for _ in 0..4 {
            let seed: [u8; 32] = r.bytes(32)?.try_into().expect("32 bytes");
            let stream = r.u64()?;
            let pos = u128::from_le_bytes(r.bytes(16)?.try_into().expect("16 bytes"));
            let mut rng = ChaCha8Rng::from_seed(seed);
            rng.set_stream(stream);
            rng.set_word_pos(pos);
            streams.push(rng);
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                body.len() - r.pos
            )));
        }
        let mut it = streams.into_iter();
        let mut next = || it.next().expect("four streams");
        let rng = RngStreams {
            init: next(),
            env: next(),
            explore: next(),
            replay: next(),
        };
        Ok(Self {
            config,
            step,
            optimizer_step,
            network,
            ledger,
            rng,
        })
    }

    /// Writes atomically: a sibling temporary file is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Human-readable dump for debugging. Not read back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# checkpoint format {VERSION}");
        let _ = writeln!(s, "step {}", self.step);
        let _ = writeln!(s, "optimizer_step {}", self.optimizer_step);
        let _ = writeln!(
            s,
            "budget {} used {}",
            self.ledger.budget(),
            self.ledger.len()
        );
        for r in self.ledger.records() {
            let _ = writeln!(
                s,
                "grown step={} layer={} row={} col={} grad={:e}",
                r.step, r.layer, r.row, r.col, r.magnitude
            );
        }
        for (l, (layer, split)) in self
            .network
            .layers()
            .iter()
            .zip(self.network.partition().layers())
            .enumerate()
        {
            let _ = writeln!(
                s,
                "\n[layer {l}] {}x{} nnz={} in_sizes={:?} out_sizes={:?}",
                layer.out_dim(),
                layer.in_dim(),
                layer.mask().nnz(),
                split.in_sizes(),
                split.out_sizes()
            );
            for i in 0..layer.out_dim() {
                let _ = write!(s, "{:>4} b={:+.6e} |", i, layer.bias()[i]);
                for j in 0..layer.in_dim() {
                    if layer.mask().get(i, j) {
                        let _ = write!(s, " {:+.3e}", layer.weights().get(i, j));
                    } else {
                        s.push_str("     .     ");
                    }
                }
                s.push('\n');
            }
        }
        let _ = writeln!(s, "\n[config]\n{}", self.config);
        s
    }
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(w: &mut Vec<u8>, v: f64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (k, &b) in bits.iter().enumerate() {
        if b {
            out[k / 8] |= 1 << (k % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|k| bytes[k / 8] >> (k % 8) & 1 == 1).collect()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.bytes(8)?.try_into().expect("8 bytes"),
        ))
    }

    /// A length or index; must fit the address space.
    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length out of range".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.bytes(8)?.try_into().expect("8 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Algo;
    use crate::envs::Variant;

    fn trained(algo: Algo) -> (RunConfig, Trainer) {
        let mut c = RunConfig::new(Variant::Communication, algo, 11);
        c.hidden = 4;
        c.batch = 8;
        c.buffer = 1000;
        c.total_steps = 300;
        c.eval_every = 0;
        c.growth.start = 50;
        c.growth.end = 200;
        c.growth.period = 50;
        c.growth.budget = 7;
        let mut t = Trainer::new(c.trainer_config()).unwrap();
        t.run().unwrap();
        (c, t)
    }

    #[test]
    fn bits_pack_round_trip() {
        let bits: Vec<bool> = (0..19).map(|k| k % 3 == 0 || k == 18).collect();
        assert_eq!(unpack_bits(&pack_bits(&bits), 19), bits);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (c, t) = trained(Algo::Bun);
        let ck = Checkpoint::from_trainer(&c, &t);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.config, c);
        assert_eq!(back.step, 300);
        assert_eq!(back.ledger.records(), t.ledger().records());
        assert_eq!(back.rng, *t.rng());
        let s: Vec<f64> = (0..8).map(|k| (k as f64 * 0.37).sin()).collect();
        let a = t.online().forward(&s).unwrap();
        let b = back.network.forward(&s).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(back.network.masks_equal(t.online()));
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let (c, t) = trained(Algo::Decentralized);
        let mut bytes = Checkpoint::from_trainer(&c, &t).to_bytes();
        bytes[0] = b'X';
        assert!(
            matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(m)) if m.contains("magic"))
        );
    }

    #[test]
    fn newer_version_is_refused() {
        let (c, t) = trained(Algo::Decentralized);
        let mut bytes = Checkpoint::from_trainer(&c, &t).to_bytes();
        bytes[8..12].copy_from_slice(&(VERSION + 1).to_le_bytes());
        assert!(
            matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(m)) if m.contains("version"))
        );
    }

    #[test]
    fn flipped_payload_bit_fails_checksum() {
        let (c, t) = trained(Algo::Bun);
        let mut bytes = Checkpoint::from_trainer(&c, &t).to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        assert!(
            matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(m)) if m.contains("checksum"))
        );
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 9]).is_err());
        assert!(Checkpoint::from_bytes(&[]).is_err());
    }

    #[test]
    fn text_dump_mentions_growth() {
        let (c, t) = trained(Algo::Bun);
        let text = Checkpoint::from_trainer(&c, &t).to_text();
        assert!(text.contains("budget 7 used 7"));
        assert!(text.contains("[layer 3]"));
    }
}
