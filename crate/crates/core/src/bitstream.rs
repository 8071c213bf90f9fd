//! `.iac` container: header, the coded parameter update, then the coded
//! latents of every frame. Byte layout is described in `FORMAT.md`.

use crc32fast::hash as crc32;

use crate::checkpoint::{hex, model_hash, FinetunedModel, ModelHash, Reader};
use crate::entropy::{FrequencyTable, LatentTable, RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};
use crate::model::{CodecModel, LatentPair, MeanScale, ModelConfig};
use crate::prior::SpikeSlabPrior;
use crate::tensor::Tensor;
use crate::train::{decode_frame, pad_frame};

pub const MAGIC: [u8; 4] = *b"IAC1";
pub const VERSION: u16 = 1;
/// Bytes before the first sub-stream, header CRC included.
pub const HEADER_LEN: usize = 98;

#[derive(Clone, Debug, PartialEq)]
pub struct StreamHeader {
    pub width: u32,
    pub height: u32,
    pub frames: u32,
    pub beta: f64,
    pub step: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub bins: u32,
    pub model_hash: ModelHash,
}

impl StreamHeader {
    pub fn prior(&self) -> Result<SpikeSlabPrior> {
        let p = SpikeSlabPrior::new(self.sigma, self.step, self.alpha)?;
        if p.bins() != self.bins as usize {
            return Err(Error::InvalidPrior(format!(
                "header declares {} bins, prior gives {}",
                self.bins,
                p.bins()
            )));
        }
        Ok(p)
    }

    /// Frame size after padding.
    pub fn padded_dims(&self) -> (usize, usize) {
        let m = ModelConfig::pad_multiple();
        ((self.height as usize).div_ceil(m) * m, (self.width as usize).div_ceil(m) * m)
    }
}

/// Header plus the two entropy-coded payloads.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: StreamHeader,
    pub update_stream: Vec<u8>,
    pub latent_stream: Vec<u8>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(HEADER_LEN + self.update_stream.len() + self.latent_stream.len() + 8);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [h.width, h.height, h.frames] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in [h.beta, h.step, h.sigma, h.alpha] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&h.bins.to_le_bytes());
        out.extend_from_slice(&h.model_hash);
        out.extend_from_slice(&(self.update_stream.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.latent_stream.len() as u32).to_le_bytes());
        let crc = crc32(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        debug_assert_eq!(out.len(), HEADER_LEN);
        for s in [&self.update_stream, &self.latent_stream] {
            out.extend_from_slice(s);
            out.extend_from_slice(&crc32(s).to_le_bytes());
        }
        out
    }

    /// Parses and checks magic, version and every CRC.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "header");
        let magic = r.array::<4>()?;
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = r.u16()?;
        let width = r.u32()?;
        let height = r.u32()?;
        let frames = r.u32()?;
        let beta = r.f64()?;
        let step = r.f64()?;
        let sigma = r.f64()?;
        let alpha = r.f64()?;
        let bins = r.u32()?;
        let model_hash = r.array::<32>()?;
        let update_len = r.u32()? as usize;
        let latent_len = r.u32()? as usize;
        let computed = crc32(&bytes[..r.position()]);
        let stored = r.u32()?;
        if stored != computed {
            return Err(Error::Crc {
                section: "header",
                stored,
                computed,
            });
        }
        if version != VERSION {
            return Err(Error::Version(version));
        }
        let mut section = |what: &'static str, len: usize| -> Result<Vec<u8>> {
            let mut sr = Reader::new(&bytes[r.position()..], what);
            let payload = sr.bytes(len)?.to_vec();
            let stored = sr.u32()?;
            r.bytes(len + 4)?;
            let computed = crc32(&payload);
            if stored != computed {
                return Err(Error::Crc {
                    section: what,
                    stored,
                    computed,
                });
            }
            Ok(payload)
        };
        let update_stream = section("update stream", update_len)?;
        let latent_stream = section("latent stream", latent_len)?;
        if r.remaining() != 0 {
            return Err(Error::Decode(format!("{} trailing bytes after the latent stream", r.remaining())));
        }
        Ok(Self {
            header: StreamHeader {
                width,
                height,
                frames,
                beta,
                step,
                sigma,
                alpha,
                bins,
                model_hash,
            },
            update_stream,
            latent_stream,
        })
    }
}

/// Precision of the update table. With a large spike weight the outer bins
/// carry masses near `2^-23`, far below what 16 bits can represent.
pub const UPDATE_PRECISION: u32 = 30;

/// Table shared by every update symbol.
pub fn update_table(prior: &SpikeSlabPrior) -> Result<FrequencyTable> {
    FrequencyTable::from_pmf(&prior.build_pmf().masses, UPDATE_PRECISION)
}

/// Codes receiver updates, in parameter order, under the prior's pmf.
pub fn encode_update(update: &[f64], prior: &SpikeSlabPrior) -> Result<Vec<u8>> {
    let table = update_table(prior)?;
    let grid = prior.grid();
    let mut enc = RangeEncoder::new();
    for &v in update {
        enc.encode(grid.bin_index(v)?, &table)?;
    }
    Ok(enc.finish())
}

pub fn decode_update(data: &[u8], count: usize, prior: &SpikeSlabPrior) -> Result<Vec<f64>> {
    let table = update_table(prior)?;
    let grid = prior.grid();
    let mut dec = RangeDecoder::new(data);
    (0..count).map(|_| dec.decode(&table).map(|s| grid.value(s))).collect()
}

fn channel_tables(prior: &MeanScale) -> Result<Vec<LatentTable>> {
    let [_, c, h, w] = prior.mean.dims4("hyperprior")?;
    (0..c)
        .map(|ch| {
            let i = ch * h * w;
            LatentTable::new(prior.mean.data()[i], prior.scale.data()[i])
        })
        .collect()
}

fn encode_tensor(enc: &mut RangeEncoder, values: &Tensor, tables: impl Fn(usize) -> Result<LatentTable>) -> Result<()> {
    for (i, &v) in values.data().iter().enumerate() {
        let t = tables(i)?;
        let (s, clamped) = t.symbol(v as i64);
        if clamped as f64 != v {
            return Err(Error::Decode(format!("latent {v} outside the coder support")));
        }
        enc.encode(s, &t.table)?;
    }
    Ok(())
}

fn decode_tensor(dec: &mut RangeDecoder, shape: [usize; 4], tables: impl Fn(usize) -> Result<LatentTable>) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| {
            let t = tables(i)?;
            Ok(t.value(dec.decode(&t.table)?) as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(shape.to_vec(), data)
}

/// Codes all frames' latents with the tables of the receiver model:
/// per frame `z1` under the hyperprior, then `z2` under the hyper-decoder's
/// output for that `z1`.
pub fn encode_latent_stream(model: &CodecModel, latents: &[LatentPair]) -> Result<Vec<u8>> {
    let mut enc = RangeEncoder::new();
    for z in latents {
        let hp = model.hyper_latent_prior(z.z1.dims4("encode_latents")?)?;
        let per_channel = channel_tables(&hp)?;
        let [_, _, h1, w1] = z.z1.dims4("encode_latents")?;
        encode_tensor(&mut enc, &z.z1, |i| Ok(per_channel[i / (h1 * w1)].clone()))?;
        let ms = model.latent_prior(&z.z1)?;
        encode_tensor(&mut enc, &z.z2, |i| LatentTable::new(ms.mean.data()[i], ms.scale.data()[i]))?;
    }
    Ok(enc.finish())
}

/// Latent shapes for a padded `height x width` frame.
pub fn latent_shapes(config: &ModelConfig, height: usize, width: usize) -> ([usize; 4], [usize; 4]) {
    let s2 = ModelConfig::codec_stride();
    let s1 = s2 * ModelConfig::hyper_stride();
    (
        [1, config.hyper_latent, height / s1, width / s1],
        [1, config.latent, height / s2, width / s2],
    )
}

pub fn decode_latent_stream(model: &CodecModel, data: &[u8], frames: usize, height: usize, width: usize) -> Result<Vec<LatentPair>> {
    let (s1, s2) = latent_shapes(model.config(), height, width);
    let hp = model.hyper_latent_prior(s1)?;
    let per_channel = channel_tables(&hp)?;
    let plane = s1[2] * s1[3];
    let mut dec = RangeDecoder::new(data);
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        let z1 = decode_tensor(&mut dec, s1, |i| Ok(per_channel[i / plane].clone()))?;
        let ms = model.latent_prior(&z1)?;
        let z2 = decode_tensor(&mut dec, s2, |i| LatentTable::new(ms.mean.data()[i], ms.scale.data()[i]))?;
        out.push(LatentPair { z1, z2 });
    }
    Ok(out)
}

/// Result of [`encode_instance`].
#[derive(Clone, Debug)]
pub struct EncodedInstance {
    pub bytes: Vec<u8>,
    /// Computed discrete model rate of the update, in bits.
    pub model_bits: f64,
    /// Computed latent rate, in bits.
    pub rate_bits: f64,
    pub update_stream_bytes: usize,
    pub latent_stream_bytes: usize,
    /// Transmitter-side reconstructions, cropped and clamped.
    pub reconstructions: Vec<Tensor>,
    pub latents: Vec<LatentPair>,
    pub pixels: usize,
}

impl EncodedInstance {
    pub fn rate_bpp(&self) -> f64 {
        self.rate_bits / self.pixels as f64
    }

    pub fn model_rate_bpp(&self) -> f64 {
        self.model_bits / self.pixels as f64
    }

    /// Coded size of the whole file per pixel.
    pub fn file_bpp(&self) -> f64 {
        (self.bytes.len() * 8) as f64 / self.pixels as f64
    }
}

fn frame_dims(frames: &[Tensor]) -> Result<(usize, usize)> {
    let Some(first) = frames.first() else {
        return Ok((0, 0));
    };
    let [_, _, h, w] = first.dims4("encode_instance")?;
    for f in frames {
        let [_, _, fh, fw] = f.dims4("encode_instance")?;
        if (fh, fw) != (h, w) {
            return Err(Error::Dataset(format!("frames of {fh}x{fw} and {h}x{w} mixed")));
        }
    }
    Ok((h, w))
}

/// Codes `frames` with the finetuned model: the update first, then every
/// frame's latents under the tables of `theta_D + update`.
pub fn encode_instance(frames: &[Tensor], global: &CodecModel, finetuned: &FinetunedModel, beta: f64) -> Result<EncodedInstance> {
    let model = finetuned.apply(global)?;
    let latents = frames
        .iter()
        .map(|f| model.coded_latents(&pad_frame(f)?))
        .collect::<Result<Vec<_>>>()?;
    encode_with_latents(global, &finetuned.update, finetuned.step, finetuned.sigma, finetuned.alpha, frames, latents, beta)
}

/// [`encode_instance`] with caller-chosen latents (integral and within the
/// coder support of the receiver model).
#[allow(clippy::too_many_arguments)]
pub fn encode_with_latents(
    global: &CodecModel,
    update: &[f64],
    step: f64,
    sigma: f64,
    alpha: f64,
    frames: &[Tensor],
    latents: Vec<LatentPair>,
    beta: f64,
) -> Result<EncodedInstance> {
    let prior = SpikeSlabPrior::new(sigma, step, alpha)?;
    let grid = prior.grid();
    let canonical = update
        .iter()
        .map(|&v| grid.bin_index(v).map(|i| grid.value(i)))
        .collect::<Result<Vec<_>>>()?;
    let receiver = global.with_receiver_update(&canonical)?;
    let (h, w) = frame_dims(frames)?;
    if latents.len() != frames.len() {
        return Err(Error::Config("one latent pair per frame required".into()));
    }
    let update_stream = encode_update(&canonical, &prior)?;
    let latent_stream = encode_latent_stream(&receiver, &latents)?;
    let mut rate_bits = 0.0;
    let mut reconstructions = Vec::with_capacity(frames.len());
    for z in &latents {
        rate_bits += receiver.latent_rate(z)?;
        reconstructions.push(decode_frame(&receiver, z, h, w)?);
    }
    let container = Container {
        header: StreamHeader {
            width: w as u32,
            height: h as u32,
            frames: frames.len() as u32,
            beta,
            step,
            sigma,
            alpha,
            bins: prior.bins() as u32,
            model_hash: model_hash(global),
        },
        update_stream,
        latent_stream,
    };
    Ok(EncodedInstance {
        bytes: container.to_bytes(),
        model_bits: prior.model_rate_discrete(&canonical)?,
        rate_bits,
        update_stream_bytes: container.update_stream.len(),
        latent_stream_bytes: container.latent_stream.len(),
        reconstructions,
        latents,
        pixels: frames.len() * h * w,
    })
}

/// Everything recovered from a stream.
#[derive(Clone, Debug)]
pub struct DecodedInstance {
    pub header: StreamHeader,
    pub update: Vec<f64>,
    /// `theta_D + update` on the receiver side.
    pub model: CodecModel,
    pub latents: Vec<LatentPair>,
    pub frames: Vec<Tensor>,
    pub model_bits: f64,
    pub rate_bits: f64,
}

/// Decodes the update, then the latents under the updated model, then the frames.
pub fn decode_instance(bytes: &[u8], global: &CodecModel) -> Result<DecodedInstance> {
    let c = Container::from_bytes(bytes)?;
    let actual = model_hash(global);
    if actual != c.header.model_hash {
        return Err(Error::ModelHash {
            expected: hex(&c.header.model_hash),
            actual: hex(&actual),
        });
    }
    let prior = c.header.prior()?;
    let update = decode_update(&c.update_stream, global.receiver_parameter_count(), &prior)?;
    let model = global.with_receiver_update(&update)?;
    let (h, w) = (c.header.height as usize, c.header.width as usize);
    let frames_n = c.header.frames as usize;
    let (ph, pw) = c.header.padded_dims();
    let latents = if frames_n == 0 {
        Vec::new()
    } else {
        decode_latent_stream(&model, &c.latent_stream, frames_n, ph, pw)?
    };
    let mut rate_bits = 0.0;
    let mut frames = Vec::with_capacity(frames_n);
    for z in &latents {
        rate_bits += model.latent_rate(z)?;
        frames.push(decode_frame(&model, z, h, w)?);
    }
    Ok(DecodedInstance {
        model_bits: prior.model_rate_discrete(&update)?,
        header: c.header,
        update,
        model,
        latents,
        frames,
        rate_bits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::model_hash;
    use crate::synth;

    fn setup(frames: usize) -> (CodecModel, FinetunedModel, Vec<Tensor>) {
        let g = CodecModel::new(ModelConfig::tiny(), 11);
        let n = g.receiver_parameter_count();
        let update: Vec<f64> = (0..n).map(|i| if i % 13 == 0 { 0.005 * ((i % 5) as f64 - 2.0) } else { 0.0 }).collect();
        let ft = FinetunedModel {
            global_hash: model_hash(&g),
            step: 0.005,
            sigma: 0.05,
            alpha: 1000.0,
            transmitter: g.transmitter_params(),
            update,
        };
        (g, ft, synth::instance(4, frames, 32, 32))
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (g, ft, frames) = setup(2);
        let enc = encode_instance(&frames, &g, &ft, 1e-3).unwrap();
        let dec = decode_instance(&enc.bytes, &g).unwrap();
        assert_eq!(dec.update, ft.update);
        assert_eq!(dec.frames, enc.reconstructions);
        assert_eq!(dec.latents, enc.latents);
        assert_eq!(dec.rate_bits, enc.rate_bits);
        assert_eq!(dec.model_bits, enc.model_bits);
    }

    #[test]
    fn header_layout() {
        let (g, ft, frames) = setup(1);
        let enc = encode_instance(&frames, &g, &ft, 1e-3).unwrap();
        assert_eq!(&enc.bytes[..4], b"IAC1");
        assert_eq!(enc.bytes.len(), HEADER_LEN + enc.update_stream_bytes + enc.latent_stream_bytes + 8);
    }

    #[test]
    fn empty_instance_decodes() {
        let (g, ft, _) = setup(0);
        let enc = encode_instance(&[], &g, &ft, 1e-3).unwrap();
        let dec = decode_instance(&enc.bytes, &g).unwrap();
        assert!(dec.frames.is_empty());
        assert_eq!(dec.update, ft.update);
    }

    #[test]
    fn distinct_errors() {
        let (g, ft, frames) = setup(1);
        let bytes = encode_instance(&frames, &g, &ft, 1e-3).unwrap().bytes;

        let mut bad = bytes.clone();
        bad[HEADER_LEN] ^= 0x10;
        assert!(matches!(decode_instance(&bad, &g), Err(Error::Crc { section: "update stream", .. })));

        let mut bad = bytes.clone();
        bad[7] ^= 1;
        assert!(matches!(decode_instance(&bad, &g), Err(Error::Crc { section: "header", .. })));

        assert!(matches!(decode_instance(&bytes[..bytes.len() - 1], &g), Err(Error::Truncated(_))));
        assert!(matches!(decode_instance(&bytes[..50], &g), Err(Error::Truncated(_))));

        let other = CodecModel::new(ModelConfig::tiny(), 12);
        assert!(matches!(decode_instance(&bytes, &other), Err(Error::ModelHash { .. })));
    }

    #[test]
    fn off_grid_update_rejected() {
        let (g, mut ft, frames) = setup(1);
        ft.update[0] = 0.0031;
        assert!(matches!(encode_instance(&frames, &g, &ft, 1e-3), Err(Error::OffGrid { .. })));
    }
}
