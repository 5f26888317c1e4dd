//! Versioned binary checkpoints: a flat map of parameter key → shape +
//! row-major f64 values, plus the learner step counter. Round-trips are
//! bit-exact; target networks are reconstructed by a sync on load.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::ensemble::DualEnsemble;
use crate::error::{Error, Result};
use crate::mat::Mat;

const MAGIC: &[u8; 4] = b"DMQ1";
const VERSION: u32 = 1;

pub struct Checkpoint {
    pub step: u64,
    pub params: BTreeMap<String, Mat>,
}

pub fn save(path: &Path, ens: &DualEnsemble) -> Result<()> {
    let named = ens.named_online_params();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&ens.step.to_le_bytes());
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (key, p) in named {
        out.extend_from_slice(&(key.len() as u32).to_le_bytes());
        out.extend_from_slice(key.as_bytes());
        out.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = 0usize;
    let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
        if *cur + n > bytes.len() {
            return Err(Error::Checkpoint("truncated file".to_string()));
        }
        let s = &bytes[*cur..*cur + n];
        *cur += n;
        Ok(s)
    };
    if take(&mut cur, 4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".to_string()));
    }
    let version = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let step = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap());
    let count = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap());
    let mut params = BTreeMap::new();
    for _ in 0..count {
        let klen = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
        let key = String::from_utf8(take(&mut cur, klen)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 key".to_string()))?;
        let rows = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()));
        }
        params.insert(key, Mat::from_vec(rows, cols, data));
    }
    Ok(Checkpoint { step, params })
}

/// Write the stored parameters into a freshly built ensemble. Every key must
/// match in name and shape; targets are rebuilt by a hard sync.
pub fn restore(ens: &mut DualEnsemble, ckpt: &Checkpoint) -> Result<()> {
    let mut seen = 0usize;
    for (key, param) in ens.named_online_params_mut() {
        match ckpt.params.get(&key) {
            None => return Err(Error::Checkpoint(format!("missing parameter {key}"))),
            Some(m) => {
                if m.shape() != param.value.shape() {
                    return Err(Error::Checkpoint(format!(
                        "shape mismatch for {key}: checkpoint {}x{}, network {}x{}",
                        m.rows(),
                        m.cols(),
                        param.value.rows(),
                        param.value.cols()
                    )));
                }
                param.value = m.clone();
                seen += 1;
            }
        }
    }
    if seen != ckpt.params.len() {
        let expected: std::collections::BTreeSet<String> =
            ens.named_online_params().into_iter().map(|(k, _)| k).collect();
        let extra: Vec<&String> = ckpt.params.keys().filter(|k| !expected.contains(*k)).collect();
        return Err(Error::Checkpoint(format!("checkpoint has {} unexpected parameters, e.g. {:?}", extra.len(), extra.first())));
    }
    ens.step = ckpt.step;
    ens.sync_targets();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{EnsembleConfig, NetDims};
    use crate::nets::MixerKind;
    use crate::rng::RngHub;

    fn dims() -> NetDims {
        NetDims {
            n_agents: 2,
            obs_dim: 4,
            state_dim: 5,
            n_actions: 3,
            agent_hidden: (6, 6),
            hyper_hidden: 4,
            mixer: MixerKind::QmixElu { l_h: 3, alpha_elu: 1.0 },
        }
    }

    fn cfg() -> EnsembleConfig {
        EnsembleConfig { h: 2, n_h: 2, k: 2, n_k: 1, alpha_reg: 0.01, gamma: 0.9, lr: 1e-3, target_period: 5 }
    }

    #[test]
    fn round_trip_bit_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("a.ckpt");
        let mut ens = DualEnsemble::init(cfg(), dims(), &RngHub::new(5)).unwrap();
        ens.step = 1234;
        save(&path, &ens).unwrap();
        let ckpt = load(&path).unwrap();
        let mut other = DualEnsemble::init(cfg(), dims(), &RngHub::new(99)).unwrap();
        restore(&mut other, &ckpt).unwrap();
        assert_eq!(other.step, 1234);
        for ((ka, pa), (kb, pb)) in ens.named_online_params().iter().zip(other.named_online_params()) {
            assert_eq!(ka, &kb);
            let bits_a: Vec<u64> = pa.value.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = pb.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(other.max_target_gap(), 0.0);

        // Saving the restored ensemble reproduces the same bytes.
        let path2 = tmp.path().join("b.ckpt");
        save(&path2, &other).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn restore_rejects_shape_mismatch() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("a.ckpt");
        let ens = DualEnsemble::init(cfg(), dims(), &RngHub::new(5)).unwrap();
        save(&path, &ens).unwrap();
        let ckpt = load(&path).unwrap();
        let bigger = NetDims { agent_hidden: (8, 6), ..dims() };
        let mut other = DualEnsemble::init(cfg(), bigger, &RngHub::new(5)).unwrap();
        let err = restore(&mut other, &ckpt).unwrap_err().to_string();
        assert!(err.contains("shape mismatch"), "{err}");
    }

    #[test]
    fn restore_rejects_missing_params() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("a.ckpt");
        let small = EnsembleConfig { h: 1, n_h: 1, ..cfg() };
        let ens = DualEnsemble::init(small, dims(), &RngHub::new(5)).unwrap();
        save(&path, &ens).unwrap();
        let ckpt = load(&path).unwrap();
        let mut other = DualEnsemble::init(cfg(), dims(), &RngHub::new(5)).unwrap();
        assert!(restore(&mut other, &ckpt).is_err());
    }

    #[test]
    fn load_rejects_garbage() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("junk.ckpt");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load(&path).is_err());
    }
}
