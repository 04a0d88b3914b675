//! Versioned binary checkpoints of a 2D/3D network pair.
//!
//! Layout, all integers `u32` and all reals `f32`, little-endian:
//!
//! ```text
//! "MMTTA1"
//! K
//! for branch in [2d, 3d]: width_count, widths[width_count]   (input, hidden.., K)
//! for branch in [2d, 3d]:
//!     for each block: weight (in×out, row-major), bias, mu, sigma, gamma, beta
//!     classifier weight, classifier bias
//! ```

use std::path::Path;
use std::sync::Arc;

use crate::batchnorm::BnState;
use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::model::branch::{Architecture, BranchNet, Linear, Role};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"MMTTA1";

pub fn encode_checkpoint(net2d: &BranchNet, net3d: &BranchNet) -> Result<Vec<u8>> {
    let classes = net2d.architecture().classes;
    if net3d.architecture().classes != classes {
        return Err(Error::dim(
            "encode_checkpoint",
            classes,
            net3d.architecture().classes,
        ));
    }
    let mut w = Writer::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.usize(classes)?;
    for net in [net2d, net3d] {
        let widths = net.architecture().widths();
        w.usize(widths.len())?;
        for width in widths {
            w.usize(width)?;
        }
    }
    for net in [net2d, net3d] {
        let depth = net.bn_states().len();
        for (l, layer) in net.layers().iter().enumerate() {
            w.f32s(layer.weight.data());
            w.f32s(layer.bias.data());
            if l < depth {
                for part in net.bn_states()[l].components() {
                    w.f32s(part);
                }
            }
        }
    }
    Ok(w.finish())
}

fn read_arch(r: &mut Reader<'_>, classes: usize) -> Result<Architecture> {
    let at = r.offset();
    let count = r.u32("width count")? as usize;
    if !(2..=64).contains(&count) {
        return Err(Error::format(at, format!("implausible width count {count}")));
    }
    let mut widths = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.offset();
        let w = r.u32("layer width")? as usize;
        if w == 0 || w > 1 << 16 {
            return Err(Error::format(at, format!("implausible layer width {w}")));
        }
        widths.push(w);
    }
    if widths[count - 1] != classes {
        return Err(Error::format(
            at,
            format!(
                "last width {} does not match class count {classes}",
                widths[count - 1]
            ),
        ));
    }
    Architecture::new(widths[0], widths[1..count - 1].to_vec(), classes)
        .map_err(|e| Error::format(at, e.to_string()))
}

fn read_branch(r: &mut Reader<'_>, arch: Architecture) -> Result<BranchNet> {
    let widths = arch.widths();
    let depth = arch.hidden.len();
    let mut layers = Vec::with_capacity(depth + 1);
    let mut bns = Vec::with_capacity(depth);
    for (l, w) in widths.windows(2).enumerate() {
        let weight = Tensor::new(w[0], w[1], r.f32s(w[0] * w[1], "weight")?)?;
        let bias = Tensor::new(1, w[1], r.f32s(w[1], "bias")?)?;
        layers.push(Linear {
            weight: Arc::new(weight),
            bias: Arc::new(bias),
        });
        if l < depth {
            let at = r.offset();
            let mu = r.f32s(w[1], "mu")?;
            let sigma = r.f32s(w[1], "sigma")?;
            let gamma = r.f32s(w[1], "gamma")?;
            let beta = r.f32s(w[1], "beta")?;
            bns.push(
                BnState::new(mu, sigma, gamma, beta)
                    .map_err(|e| Error::format(at, e.to_string()))?,
            );
        }
    }
    BranchNet::from_parts(arch, layers, bns, Role::Source)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(BranchNet, BranchNet)> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let classes = r.u32("class count")? as usize;
    if classes == 0 {
        return Err(Error::format(6, "class count is zero"));
    }
    let arch2d = read_arch(&mut r, classes)?;
    let arch3d = read_arch(&mut r, classes)?;
    let net2d = read_branch(&mut r, arch2d)?;
    let net3d = read_branch(&mut r, arch3d)?;
    r.finish()?;
    Ok((net2d, net3d))
}

pub fn save_checkpoint(path: &Path, net2d: &BranchNet, net3d: &BranchNet) -> Result<()> {
    write_file(path, &encode_checkpoint(net2d, net3d)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(BranchNet, BranchNet)> {
    decode_checkpoint(&read_file(path)?)
}

/// Loads a checkpoint and rejects it unless both architectures match.
pub fn load_checkpoint_expecting(
    path: &Path,
    arch2d: &Architecture,
    arch3d: &Architecture,
) -> Result<(BranchNet, BranchNet)> {
    let (a, b) = load_checkpoint(path)?;
    for (got, want, name) in [(&a, arch2d, "2d"), (&b, arch3d, "3d")] {
        if got.architecture() != want {
            return Err(Error::format(
                6,
                format!(
                    "{name} architecture {:?} does not match expected {:?}",
                    got.architecture().widths(),
                    want.widths()
                ),
            ));
        }
    }
    Ok((a, b))
}
