//! Versioned little-endian binary dump of fitted sum-of-trees states.

use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::tree::{Node, Tree};
use super::{Affine, BartFit, BartKind, SumOfTreesState};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DRNPBART";
const VERSION: u32 = 1;

fn io(e: std::io::Error) -> Error {
    Error::Io(e.to_string())
}

fn kind_code(k: BartKind) -> u8 {
    match k {
        BartKind::Continuous => 0,
        BartKind::Probit => 1,
        BartKind::LogitTarget => 2,
    }
}

pub fn write_fit<W: Write>(fit: &BartFit, mut w: W) -> Result<()> {
    (|| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(VERSION)?;
        w.write_u8(kind_code(fit.kind))?;
        w.write_u32::<LE>(fit.n_features as u32)?;
        w.write_f64::<LE>(fit.transform.shift)?;
        w.write_f64::<LE>(fit.transform.scale)?;
        w.write_u32::<LE>(fit.states.len() as u32)?;
        for s in &fit.states {
            w.write_u64::<LE>(s.iteration as u64)?;
            w.write_f64::<LE>(s.sigma.unwrap_or(f64::NAN))?;
            w.write_u32::<LE>(s.trees.len() as u32)?;
            for t in &s.trees {
                let t = t.compact();
                w.write_u32::<LE>(t.nodes.len() as u32)?;
                for n in &t.nodes {
                    w.write_u8(n.leaf as u8)?;
                    w.write_u32::<LE>(n.var)?;
                    w.write_f64::<LE>(n.cut)?;
                    w.write_u32::<LE>(n.left)?;
                    w.write_u32::<LE>(n.right)?;
                    w.write_u32::<LE>(n.parent)?;
                    w.write_u32::<LE>(n.depth)?;
                    w.write_f64::<LE>(n.mu)?;
                }
            }
        }
        Ok(())
    })()
    .map_err(io)
}

/// Reads a dump; acceptance rates and warnings are not stored.
pub fn read_fit<R: Read>(mut r: R) -> Result<BartFit> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Io("not a BART dump".into()));
    }
    let version = r.read_u32::<LE>().map_err(io)?;
    if version != VERSION {
        return Err(Error::Io(format!("unsupported dump version {version}")));
    }
    let kind = match r.read_u8().map_err(io)? {
        0 => BartKind::Continuous,
        1 => BartKind::Probit,
        2 => BartKind::LogitTarget,
        c => return Err(Error::Io(format!("unknown model kind {c}"))),
    };
    (|| -> std::io::Result<BartFit> {
        let n_features = r.read_u32::<LE>()? as usize;
        let shift = r.read_f64::<LE>()?;
        let scale = r.read_f64::<LE>()?;
        let n_states = r.read_u32::<LE>()?;
        let mut states = Vec::with_capacity(n_states as usize);
        for _ in 0..n_states {
            let iteration = r.read_u64::<LE>()? as usize;
            let sigma = r.read_f64::<LE>()?;
            let n_trees = r.read_u32::<LE>()?;
            let mut trees = Vec::with_capacity(n_trees as usize);
            for _ in 0..n_trees {
                let n_nodes = r.read_u32::<LE>()?;
                let mut nodes = Vec::with_capacity(n_nodes as usize);
                for _ in 0..n_nodes {
                    nodes.push(Node {
                        leaf: r.read_u8()? != 0,
                        var: r.read_u32::<LE>()?,
                        cut: r.read_f64::<LE>()?,
                        left: r.read_u32::<LE>()?,
                        right: r.read_u32::<LE>()?,
                        parent: r.read_u32::<LE>()?,
                        depth: r.read_u32::<LE>()?,
                        mu: r.read_f64::<LE>()?,
                    });
                }
                trees.push(Tree::from_nodes(nodes));
            }
            states.push(SumOfTreesState { trees, sigma: (!sigma.is_nan()).then_some(sigma), iteration });
        }
        Ok(BartFit {
            kind,
            n_features,
            states,
            transform: Affine { shift, scale },
            acceptance: [0.0; 3],
            warnings: Vec::new(),
        })
    })()
    .map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bart::{bart_fit_continuous, bart_predict, BartConfig, BartScale};
    use nalgebra::DMatrix;

    #[test]
    fn round_trip_preserves_predictions() {
        let x = DMatrix::from_fn(40, 2, |i, j| ((i * 7 + j * 3) % 11) as f64);
        let y: Vec<f64> = (0..40).map(|i| x[(i, 0)] - 0.5 * x[(i, 1)]).collect();
        let cfg = BartConfig { m: 10, burn_in: 20, n_draws: 5, thinning: 1, seed: 9, ..Default::default() };
        let fit = bart_fit_continuous(&x, &y, &cfg).unwrap();
        let mut buf = Vec::new();
        write_fit(&fit, &mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        let back = read_fit(buf.as_slice()).unwrap();
        assert_eq!(back.states, fit.states);
        assert_eq!(
            bart_predict(&back, &x, BartScale::Response).unwrap(),
            bart_predict(&fit, &x, BartScale::Response).unwrap()
        );
        assert!(read_fit(&buf[..20]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_fit(bad.as_slice()).is_err());
    }
}
