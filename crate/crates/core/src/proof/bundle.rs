//! Witness bundles: a labeled binary container of nonce-appended values plus a JSON index.

use super::public_u_digest;
use crate::commitments::{Digest, Nonce, NonceAppended, NONCE_LEN};
use crate::fixedpoint::{FixedScalar, FixedTensor};
use crate::kernels::{OutputNonces, ResidualBlock, ScOutput, SvdWitness, TcIntervalInputs, TcIntervalState, TcStepInput};
use serde::{Deserialize, Serialize};

const MAGIC: &[u8; 5] = b"ZKWB1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcWitness {
    pub prev: TcIntervalState,
    pub inputs: TcIntervalInputs,
    pub output: TcIntervalState,
}

impl TcWitness {
    /// Previous-state digests, then `(y, G, H, K, u)` per timestamp.
    pub fn public_inputs(&self) -> Vec<Digest> {
        let mut out: Vec<Digest> = self.prev.public_commitments().iter().map(|r| r.digest).collect();
        for s in &self.inputs.steps {
            out.extend(s.public_commitments().iter().map(|r| r.digest));
            out.push(public_u_digest(&s.u));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScWitness {
    pub block: ResidualBlock,
    pub svd: SvdWitness,
    pub output: ScOutput,
}

impl ScWitness {
    /// `(r_acc, S_acc, κ)` then `(U, Σ^{-1/2})` digests.
    pub fn public_inputs(&self) -> Vec<Digest> {
        let mut out: Vec<Digest> = self.block.public_commitments().iter().map(|r| r.digest).collect();
        out.extend(self.svd.public_commitments().iter().map(|r| r.digest));
        out
    }
}

/// Ordered `(label, payload)` entries.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WitnessBundle {
    pub entries: Vec<(String, Vec<u8>)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleIndex {
    pub stream_id: String,
    pub window: u64,
    pub interval: u32,
    #[serde(rename = "D")]
    pub d_steps: u32,
    pub psf: u8,
    pub digests: Vec<Digest>,
}

type R<T> = std::result::Result<T, String>;

impl WitnessBundle {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (label, payload) in &self.entries {
            out.extend_from_slice(&(label.len() as u32).to_le_bytes());
            out.extend_from_slice(label.as_bytes());
            out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
            out.extend_from_slice(payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> R<Self> {
        if bytes.get(..5) != Some(MAGIC.as_slice()) {
            return Err("bad magic".into());
        }
        let mut at = 5;
        let mut read = |n: usize| -> R<&[u8]> {
            let s = bytes.get(at..at + n).ok_or("truncated bundle")?;
            at += n;
            Ok(s)
        };
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
        let count = u32_at(read(4)?);
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let ll = u32_at(read(4)?);
            let label = String::from_utf8(read(ll)?.to_vec()).map_err(|_| "label is not utf-8")?;
            let pl = u32_at(read(4)?);
            entries.push((label, read(pl)?.to_vec()));
        }
        if at != bytes.len() {
            return Err("trailing bytes".into());
        }
        Ok(Self { entries })
    }

    fn push(&mut self, label: &str, payload: Vec<u8>) {
        self.entries.push((label.to_string(), payload));
    }

    fn push_state(&mut self, prefix: &str, s: &TcIntervalState) {
        for (l, v) in crate::commitments::CHAIN_LABELS.iter().zip([&s.x, &s.p, &s.r_acc, &s.s_acc, &s.kappa]) {
            self.push(&format!("{prefix}.{l}"), v.as_bytes().to_vec());
        }
        self.push(&format!("{prefix}.index"), s.interval_index.to_le_bytes().to_vec());
    }

    pub fn from_tc(w: &TcWitness) -> Self {
        let mut b = Self::default();
        b.push_state("in", &w.prev);
        for (i, s) in w.inputs.steps.iter().enumerate() {
            for (l, v) in crate::kernels::STEP_LABELS.iter().zip([&s.y, &s.g, &s.h, &s.k]) {
                b.push(&format!("step{i}.{l}"), v.as_bytes().to_vec());
            }
            b.push(&format!("step{i}.u"), s.u.canonical_bytes());
        }
        let n = &w.inputs.output_nonces;
        for (l, v) in crate::commitments::CHAIN_LABELS.iter().zip([n.x, n.p, n.r_acc, n.s_acc, n.kappa]) {
            b.push(&format!("nonce.{l}"), v.0.to_vec());
        }
        b.push_state("out", &w.output);
        b
    }

    pub fn from_sc(w: &ScWitness) -> Self {
        let mut b = Self::default();
        b.push("r_acc", w.block.r_acc.as_bytes().to_vec());
        b.push("S_acc", w.block.s_acc.as_bytes().to_vec());
        b.push("kappa", w.block.kappa.as_bytes().to_vec());
        b.push("U", w.svd.u.as_bytes().to_vec());
        b.push("Sigma_inv_sqrt", w.svd.sigma_inv_sqrt.as_bytes().to_vec());
        let o = &w.output;
        let mut out = vec![o.rho as u8, o.eta as u8, o.kappa as u8, o.t_stat.psf()];
        out.extend_from_slice(&o.t_stat.raw().to_le_bytes());
        out.extend_from_slice(&o.t_ucl.raw().to_le_bytes());
        b.push("output", out);
        b
    }

    fn cursor(&self) -> Cursor<'_> {
        Cursor { entries: &self.entries, at: 0 }
    }

    pub fn to_tc(&self) -> R<TcWitness> {
        let mut c = self.cursor();
        let prev = c.state("in")?;
        let mut steps = Vec::new();
        while c.peek().is_some_and(|l| l.starts_with("step")) {
            let i = steps.len();
            let y = c.sealed(&format!("step{i}.y"))?;
            let g = c.sealed(&format!("step{i}.G"))?;
            let h = c.sealed(&format!("step{i}.H"))?;
            let k = c.sealed(&format!("step{i}.K"))?;
            let ub = c.take(&format!("step{i}.u"))?;
            let (u, used) = FixedTensor::from_canonical_bytes(ub).map_err(|e| e.to_string())?;
            if used != ub.len() {
                return Err("trailing bytes in u".into());
            }
            steps.push(TcStepInput { y, g, h, k, u });
        }
        let output_nonces = OutputNonces {
            x: c.nonce("nonce.x")?,
            p: c.nonce("nonce.P")?,
            r_acc: c.nonce("nonce.r_acc")?,
            s_acc: c.nonce("nonce.S_acc")?,
            kappa: c.nonce("nonce.kappa")?,
        };
        let output = c.state("out")?;
        c.finish()?;
        Ok(TcWitness { prev, inputs: TcIntervalInputs { steps, output_nonces }, output })
    }

    pub fn to_sc(&self) -> R<ScWitness> {
        let mut c = self.cursor();
        let block = ResidualBlock { r_acc: c.sealed("r_acc")?, s_acc: c.sealed("S_acc")?, kappa: c.sealed("kappa")? };
        let svd = SvdWitness { u: c.sealed("U")?, sigma_inv_sqrt: c.sealed("Sigma_inv_sqrt")? };
        let o = c.take("output")?;
        if o.len() != 20 || o[..3].iter().any(|&b| b > 1) {
            return Err("bad SC output encoding".into());
        }
        let psf = o[3];
        let scalar = |b: &[u8]| FixedScalar::from_raw(i64::from_le_bytes(b.try_into().unwrap()), psf).map_err(|e| e.to_string());
        let output = ScOutput { rho: o[0] == 1, eta: o[1] == 1, kappa: o[2] == 1, t_stat: scalar(&o[4..12])?, t_ucl: scalar(&o[12..20])? };
        c.finish()?;
        Ok(ScWitness { block, svd, output })
    }

    pub fn size_bytes(&self) -> usize {
        self.to_bytes().len()
    }
}

struct Cursor<'a> {
    entries: &'a [(String, Vec<u8>)],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<&str> {
        self.entries.get(self.at).map(|(l, _)| l.as_str())
    }

    fn take(&mut self, label: &str) -> R<&'a [u8]> {
        match self.entries.get(self.at) {
            Some((l, p)) if l == label => {
                self.at += 1;
                Ok(p)
            }
            Some((l, _)) => Err(format!("expected entry {label}, found {l}")),
            None => Err(format!("missing entry {label}")),
        }
    }

    fn sealed(&mut self, label: &str) -> R<NonceAppended> {
        Ok(NonceAppended::from_bytes(self.take(label)?.to_vec()))
    }

    fn nonce(&mut self, label: &str) -> R<Nonce> {
        let b = self.take(label)?;
        Ok(Nonce(b.try_into().map_err(|_| format!("{label} must be {NONCE_LEN} bytes"))?))
    }

    fn state(&mut self, prefix: &str) -> R<TcIntervalState> {
        let x = self.sealed(&format!("{prefix}.x"))?;
        let p = self.sealed(&format!("{prefix}.P"))?;
        let r_acc = self.sealed(&format!("{prefix}.r_acc"))?;
        let s_acc = self.sealed(&format!("{prefix}.S_acc"))?;
        let kappa = self.sealed(&format!("{prefix}.kappa"))?;
        let idx = self.take(&format!("{prefix}.index"))?;
        let interval_index = u64::from_le_bytes(idx.try_into().map_err(|_| "index must be 8 bytes")?);
        Ok(TcIntervalState { x, p, r_acc, s_acc, kappa, interval_index })
    }

    fn finish(&self) -> R<()> {
        if self.at == self.entries.len() {
            Ok(())
        } else {
            Err("unexpected trailing entries".into())
        }
    }
}
