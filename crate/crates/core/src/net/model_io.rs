//! Binary model format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "LVNM" | version u16 | input h,w,c u32 | num_classes u32
//! num_layers u32 | layer table | parameter tensors
//! ```
//!
//! Layer table entries: kind `u8` (0 conv2d, 1 relu, 2 maxpool2d, 3 flatten,
//! 4 dense) followed by that kind's `u32` fields. Parameters follow in layer
//! order as little-endian `f32` row-major: conv weights `[k,k,c_in,c_out]`
//! then bias, dense weights `[in,out]` then bias. Round-trips are bit-exact.

use crate::error::{Error, Result};
use crate::net::{LayerParams, LayerSpec, Network};
use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;

pub const MODEL_MAGIC: &[u8; 4] = b"LVNM";
pub const MODEL_VERSION: u16 = 1;

pub fn save_model(net: &Network<f32>, path: &Path) -> Result<()> {
    let bytes = model_to_bytes(net);
    let display = path.display().to_string();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(&display, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&display, e))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Network<f32>> {
    let display = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| Error::io(&display, e))?;
    model_from_bytes(&bytes).map_err(|e| match e {
        Error::BadFile { message, .. } => Error::bad_file(&display, message),
        other => other,
    })
}

pub fn model_to_bytes(net: &Network<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    let [h, w, c] = net.input_shape();
    for dim in [h, w, c] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.extend_from_slice(&(net.num_classes() as u32).to_le_bytes());
    out.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
    for layer in net.layers() {
        match layer {
            LayerSpec::Conv2d { kernel, out_channels, padding } => {
                out.push(0);
                for v in [*kernel, *out_channels, *padding] {
                    out.extend_from_slice(&(v as u32).to_le_bytes());
                }
            }
            LayerSpec::Relu => out.push(1),
            LayerSpec::MaxPool2d { window } => {
                out.push(2);
                out.extend_from_slice(&(*window as u32).to_le_bytes());
            }
            LayerSpec::Flatten => out.push(3),
            LayerSpec::Dense { out_features } => {
                out.push(4);
                out.extend_from_slice(&(*out_features as u32).to_le_bytes());
            }
        }
    }
    for params in net.params() {
        match params {
            LayerParams::Conv { weights, bias } | LayerParams::Dense { weights, bias } => {
                for v in weights.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                for v in bias {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            LayerParams::None => {}
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::bad_file("<model>", format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(4 * n, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Network<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MODEL_MAGIC {
        return Err(Error::bad_file("<model>", format!("bad magic {magic:?}, want \"LVNM\"")));
    }
    let version = r.u16("version")?;
    if version != MODEL_VERSION {
        return Err(Error::bad_file("<model>", format!("unsupported version {version}")));
    }
    let h = r.u32("input height")? as usize;
    let w = r.u32("input width")? as usize;
    let c = r.u32("input channels")? as usize;
    let declared_classes = r.u32("num_classes")? as usize;
    let num_layers = r.u32("num_layers")? as usize;

    let mut layers = Vec::with_capacity(num_layers);
    for i in 0..num_layers {
        let kind = r.take(1, "layer kind")?[0];
        let layer = match kind {
            0 => LayerSpec::Conv2d {
                kernel: r.u32("conv kernel")? as usize,
                out_channels: r.u32("conv out_channels")? as usize,
                padding: r.u32("conv padding")? as usize,
            },
            1 => LayerSpec::Relu,
            2 => LayerSpec::MaxPool2d { window: r.u32("pool window")? as usize },
            3 => LayerSpec::Flatten,
            4 => LayerSpec::Dense { out_features: r.u32("dense out_features")? as usize },
            other => {
                return Err(Error::bad_file("<model>", format!("unknown layer kind {other} at layer {i}")))
            }
        };
        layers.push(layer);
    }

    // Build once with zero parameters to recover the validated per-layer
    // shapes, then fill in the stored values.
    let skeleton = Network::<f32>::build([h, w, c], layers.clone(), 0)?;
    if skeleton.num_classes() != declared_classes {
        return Err(Error::bad_file(
            "<model>",
            format!(
                "declared num_classes {declared_classes} does not match layer table output {}",
                skeleton.num_classes()
            ),
        ));
    }
    let mut params = Vec::with_capacity(layers.len());
    for p in skeleton.params() {
        let filled = match p {
            LayerParams::Conv { weights, bias } => LayerParams::Conv {
                weights: Tensor::from_vec(weights.shape(), r.f32s(weights.len(), "conv weights")?)?,
                bias: r.f32s(bias.len(), "conv bias")?,
            },
            LayerParams::Dense { weights, bias } => LayerParams::Dense {
                weights: Tensor::from_vec(weights.shape(), r.f32s(weights.len(), "dense weights")?)?,
                bias: r.f32s(bias.len(), "dense bias")?,
            },
            LayerParams::None => LayerParams::None,
        };
        params.push(filled);
    }
    if r.pos != bytes.len() {
        return Err(Error::bad_file("<model>", format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Network::with_params([h, w, c], layers, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Image;

    fn sample_net() -> Network<f32> {
        Network::build(
            [16, 16, 3],
            vec![
                LayerSpec::Conv2d { kernel: 3, out_channels: 4, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { window: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { out_features: 5 },
            ],
            99,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_preserves_logits_bit_exactly() {
        let net = sample_net();
        let bytes = model_to_bytes(&net);
        let loaded = model_from_bytes(&bytes).unwrap();
        assert_eq!(net.params(), loaded.params());

        let mut t = Tensor::zeros(&[16, 16, 3]);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = ((i * 13) % 97) as f32 / 97.0;
        }
        let img = Image::new(t).unwrap();
        let a = net.forward(&img).unwrap();
        let b = loaded.forward(&img).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn truncated_file_rejected() {
        let bytes = model_to_bytes(&sample_net());
        for cut in [0, 3, 6, 20, bytes.len() - 1] {
            assert!(model_from_bytes(&bytes[..cut]).is_err(), "cut at {cut} must fail");
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = model_to_bytes(&sample_net());
        bytes[0] = b'X';
        let err = model_from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn mismatched_num_classes_rejected() {
        let mut bytes = model_to_bytes(&sample_net());
        // num_classes u32 sits after magic(4) + version(2) + h,w,c(12)
        bytes[18] = 9;
        let err = model_from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("num_classes"));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = model_to_bytes(&sample_net());
        bytes.push(0);
        assert!(model_from_bytes(&bytes).is_err());
    }
}
