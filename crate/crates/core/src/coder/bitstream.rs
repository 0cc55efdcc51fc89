//! The `.cgs` container.
//!
//! ```text
//! magic "CGS1" | version u8 | anchor_count u32 | K u8 | lambda f32 | s_cov f32
//! | origin 3 x f32 | step f32 | weight_len u32 | 6 x section_len u32 | crc32 u32
//! | weights (f32 LE) | locations | hyper_f | f | cov | hyper_g | g
//! ```
//!
//! All integers are little-endian. The checksum covers every byte of the
//! file except itself.

use serde::{Deserialize, Serialize};

use super::locations::{decode_cells, encode_cells, morton_order, LocationGrid};
use super::range::{RangeDecoder, RangeEncoder};
use super::tables::{FreqTable, GaussianTable};
use crate::entropy::{
    dequantize, model_scene, FactorizedPmfs, GaussianParams, RateParts, RateReport, SceneCodes, PMF_FLOOR,
    SUPPORT,
};
use crate::error::{Error, Result};
use crate::model::SplatModel;
use crate::scene::{AnchorPrimitive, CoupledPrimitive, Scene, COV_DIM, REF_DIM, RES_DIM};
use crate::entropy::{HYPER_F_DIM, HYPER_G_DIM};

pub const MAGIC: &[u8; 4] = b"CGS1";
pub const VERSION: u8 = 1;
pub const SECTION_COUNT: usize = 6;
pub const HEADER_LEN: usize = 4 + 1 + 4 + 1 + 4 + 4 + 12 + 4 + 4 + 4 * SECTION_COUNT + 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Header {
    pub version: u8,
    pub anchor_count: u32,
    pub k: u8,
    pub lambda: f32,
    pub s_cov: f32,
    pub grid: LocationGrid,
    pub weight_len: u32,
    /// Byte lengths of locations, hyper_f, f, cov, hyper_g, g.
    pub sections: [u32; SECTION_COUNT],
    pub crc: u32,
}

impl Header {
    fn to_bytes(self) -> Vec<u8> {
        let mut b = Vec::with_capacity(HEADER_LEN);
        b.extend_from_slice(MAGIC);
        b.push(self.version);
        b.extend_from_slice(&self.anchor_count.to_le_bytes());
        b.push(self.k);
        b.extend_from_slice(&self.lambda.to_le_bytes());
        b.extend_from_slice(&self.s_cov.to_le_bytes());
        for o in self.grid.origin {
            b.extend_from_slice(&o.to_le_bytes());
        }
        b.extend_from_slice(&self.grid.step.to_le_bytes());
        b.extend_from_slice(&self.weight_len.to_le_bytes());
        for s in self.sections {
            b.extend_from_slice(&s.to_le_bytes());
        }
        b.extend_from_slice(&self.crc.to_le_bytes());
        b
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::UnexpectedEof);
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::UnexpectedEof);
        }
        let mut at = 4;
        let mut take = |n: usize| {
            let s = &bytes[at..at + n];
            at += n;
            s
        };
        let version = take(1)[0];
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let u32_ = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
        let f32_ = |s: &[u8]| f32::from_le_bytes(s.try_into().expect("4 bytes"));
        let anchor_count = u32_(take(4));
        let k = take(1)[0];
        let lambda = f32_(take(4));
        let s_cov = f32_(take(4));
        let origin = [f32_(take(4)), f32_(take(4)), f32_(take(4))];
        let step = f32_(take(4));
        let weight_len = u32_(take(4));
        let mut sections = [0u32; SECTION_COUNT];
        for s in sections.iter_mut() {
            *s = u32_(take(4));
        }
        let crc = u32_(take(4));
        Ok(Header {
            version,
            anchor_count,
            k,
            lambda,
            s_cov,
            grid: LocationGrid { origin, step },
            weight_len,
            sections,
            crc,
        })
    }
}

/// Byte size of every part of a bitstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SectionSizes {
    pub header: usize,
    pub weights: usize,
    pub locations: usize,
    pub hyper_f: usize,
    pub f: usize,
    #[serde(rename = "Σ", alias = "sigma")]
    pub sigma: usize,
    pub hyper_g: usize,
    pub g: usize,
}

impl SectionSizes {
    fn from_header(h: &Header) -> Self {
        let s = h.sections.map(|v| v as usize);
        SectionSizes {
            header: HEADER_LEN,
            weights: h.weight_len as usize,
            locations: s[0],
            hyper_f: s[1],
            f: s[2],
            sigma: s[3],
            hyper_g: s[4],
            g: s[5],
        }
    }

    pub fn total(&self) -> usize {
        self.header + self.weights + self.locations + self.hyper_f + self.f + self.sigma + self.hyper_g + self.g
    }

    /// Bits actually spent on each stream, with header and weights left as
    /// overhead.
    pub fn coded_report(&self, anchors: usize, coupled: usize) -> RateReport {
        let b = |n: usize| 8.0 * n as f64;
        let mut parts = RateParts {
            bits_f: b(self.f),
            bits_sigma: b(self.sigma),
            bits_hyper_f: b(self.hyper_f),
            bits_g: b(self.g),
            bits_hyper_g: b(self.hyper_g),
            bits_locations: b(self.locations),
            anchors,
            coupled,
        };
        if coupled == 0 {
            parts.bits_g = 0.0;
        }
        parts.report()
    }

    /// Header and weight bits.
    pub fn overhead_bits(&self) -> f64 {
        8.0 * (self.header + self.weights) as f64
    }
}

/// The encoder-side hard-quantized model: exactly what a decoder will
/// reconstruct. Anchors are in Morton order of their grid cells.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub model: SplatModel,
    pub grid: LocationGrid,
    pub cells: Vec<[u32; 3]>,
    pub codes: SceneCodes,
}

impl QuantizedModel {
    /// Estimated bits per stream, with locations at their coded size.
    pub fn estimated_report(&self) -> RateReport {
        let loc_bits = 8.0 * encode_cells(&self.cells).len() as f64;
        self.codes.parts(loc_bits).report()
    }
}

pub fn quantize_model(model: &SplatModel) -> Result<QuantizedModel> {
    let mut m = model.clone();
    m.q.check()?;
    m.scene.check()?;
    if m.scene.k > u8::MAX as usize {
        return Err(Error::InvalidArgument(format!("K = {} exceeds 255", m.scene.k)));
    }
    if m.scene.anchors.len() > u32::MAX as usize {
        return Err(Error::InvalidArgument("too many anchors".into()));
    }
    m.round_to_f32();
    let locs: Vec<_> = m.scene.anchors.iter().map(|a| a.location).collect();
    let grid = LocationGrid::for_points(&locs);
    let cells = locs
        .iter()
        .map(|&p| grid.quantize(p))
        .collect::<Result<Vec<_>>>()?;
    let order = morton_order(&cells);
    m.scene = m.scene.select_anchors(&order);
    let cells: Vec<[u32; 3]> = order.iter().map(|&i| cells[i]).collect();
    let codes = model_scene(&m.scene, &m.entropy, &m.fb, &m.q)?;
    let q = m.q;
    for (a, (anchor, code)) in m.scene.anchors.iter_mut().zip(&codes.anchors).enumerate() {
        anchor.location = grid.dequantize(cells[a]);
        anchor.ref_embedding = code.embedding.map(|v| dequantize(v, q.s_f));
        anchor.set_cov_params(code.cov.map(|v| dequantize(v, q.s_cov)));
    }
    for (c, code) in m.scene.coupled.iter_mut().zip(&codes.coupled) {
        c.res_embedding = code.residual.map(|v| dequantize(v, q.s_g));
    }
    Ok(QuantizedModel {
        model: m,
        grid,
        cells,
        codes,
    })
}

fn factorized_tables(pmfs: &[Vec<f64>]) -> Result<Vec<FreqTable>> {
    pmfs.iter()
        .map(|ch| {
            let floored: Vec<f64> = ch.iter().map(|&p| p.max(PMF_FLOOR)).collect();
            FreqTable::from_pmf(-SUPPORT, &floored)
        })
        .collect()
}

fn encode_gaussian(enc: &mut RangeEncoder, symbols: &[i64], params: &[GaussianParams]) -> Result<()> {
    for (&s, p) in symbols.iter().zip(params) {
        GaussianTable::new(p.mean, p.scale)?.encode(enc, s);
    }
    Ok(())
}

fn decode_gaussian<const N: usize>(dec: &mut RangeDecoder<'_>, params: &[GaussianParams]) -> Result<[i64; N]> {
    let mut out = [0i64; N];
    for (o, p) in out.iter_mut().zip(params) {
        *o = GaussianTable::new(p.mean, p.scale)?.decode(dec)?;
    }
    Ok(out)
}

/// A finished bitstream with the state it encodes.
#[derive(Debug, Clone)]
pub struct EncodedScene {
    pub bytes: Vec<u8>,
    pub quantized: QuantizedModel,
    pub sizes: SectionSizes,
}

impl EncodedScene {
    pub fn coded_report(&self) -> RateReport {
        let s = &self.quantized.model.scene;
        self.sizes.coded_report(s.anchors.len(), s.coupled.len())
    }
}

pub fn write_scene(model: &SplatModel, lambda: f64) -> Result<EncodedScene> {
    let qm = quantize_model(model)?;
    let m = &qm.model;
    let codes = &qm.codes;
    let pmfs = m.fb.pmfs();

    let weights: Vec<u8> = m
        .weights()
        .iter()
        .flat_map(|&w| (w as f32).to_le_bytes())
        .collect();
    let locations = encode_cells(&qm.cells);

    let hyper_f_tables = factorized_tables(&pmfs.hyper_f)?;
    let hyper_g_tables = factorized_tables(&pmfs.hyper_g)?;
    let mut hyper_f = RangeEncoder::new();
    let mut f = RangeEncoder::new();
    let mut cov = RangeEncoder::new();
    for a in &codes.anchors {
        for (t, &s) in hyper_f_tables.iter().zip(&a.hyper) {
            t.encode(&mut hyper_f, s)?;
        }
        encode_gaussian(&mut f, &a.embedding, &a.embedding_params)?;
        encode_gaussian(&mut cov, &a.cov, &a.cov_params)?;
    }
    let mut hyper_g = RangeEncoder::new();
    let mut g = RangeEncoder::new();
    for c in &codes.coupled {
        for (t, &s) in hyper_g_tables.iter().zip(&c.hyper) {
            t.encode(&mut hyper_g, s)?;
        }
        encode_gaussian(&mut g, &c.residual, &c.residual_params)?;
    }
    let sections = [
        locations,
        hyper_f.finish(),
        f.finish(),
        cov.finish(),
        hyper_g.finish(),
        g.finish(),
    ];

    let mut header = Header {
        version: VERSION,
        anchor_count: m.scene.anchors.len() as u32,
        k: m.scene.k as u8,
        lambda: lambda as f32,
        s_cov: m.q.s_cov as f32,
        grid: qm.grid,
        weight_len: weights.len() as u32,
        sections: std::array::from_fn(|i| sections[i].len() as u32),
        crc: 0,
    };
    let mut payload = weights;
    for s in &sections {
        payload.extend_from_slice(s);
    }
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&header.to_bytes()[..HEADER_LEN - 4]);
    hasher.update(&payload);
    header.crc = hasher.finalize();
    let mut bytes = header.to_bytes();
    bytes.extend_from_slice(&payload);
    let sizes = SectionSizes::from_header(&header);
    debug_assert_eq!(sizes.total(), bytes.len());
    Ok(EncodedScene {
        bytes,
        quantized: qm,
        sizes,
    })
}

#[derive(Debug, Clone)]
pub struct DecodedScene {
    pub model: SplatModel,
    pub header: Header,
    pub sizes: SectionSizes,
}

impl DecodedScene {
    pub fn lambda(&self) -> f64 {
        self.header.lambda as f64
    }

    pub fn coded_report(&self) -> RateReport {
        let s = &self.model.scene;
        self.sizes.coded_report(s.anchors.len(), s.coupled.len())
    }
}

fn finish_section(dec: RangeDecoder<'_>, len: usize, name: &str) -> Result<()> {
    if dec.position() != len {
        return Err(Error::SectionLength(format!(
            "{name}: consumed {} of {len} bytes",
            dec.position()
        )));
    }
    Ok(())
}

pub fn read_scene(bytes: &[u8]) -> Result<DecodedScene> {
    let header = Header::parse(bytes)?;
    let sizes = SectionSizes::from_header(&header);
    if sizes.total() != bytes.len() {
        return Err(Error::SectionLength(format!(
            "header describes {} bytes, file has {}",
            sizes.total(),
            bytes.len()
        )));
    }
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&bytes[..HEADER_LEN - 4]);
    hasher.update(&bytes[HEADER_LEN..]);
    if hasher.finalize() != header.crc {
        return Err(Error::Checksum);
    }
    let n_weights = SplatModel::weight_count();
    if header.weight_len as usize != 4 * n_weights {
        return Err(Error::SectionLength(format!(
            "weight blob of {} bytes, expected {}",
            header.weight_len,
            4 * n_weights
        )));
    }
    if !(header.s_cov > 0.0) || !header.s_cov.is_finite() {
        return Err(Error::InvalidArgument(format!("covariance step {}", header.s_cov)));
    }
    LocationGrid::new(header.grid.origin, header.grid.step)?;

    let mut at = HEADER_LEN;
    let weight_bytes = &bytes[at..at + sizes.weights];
    at += sizes.weights;
    let mut section = |len: usize| {
        let s = &bytes[at..at + len];
        at += len;
        s
    };
    let secs: Vec<&[u8]> = header.sections.iter().map(|&l| section(l as usize)).collect();

    let mut model = SplatModel::new(
        Scene {
            anchors: vec![],
            coupled: vec![],
            k: header.k as usize,
        },
        0,
    );
    let weights: Vec<f64> = weight_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    model.set_weights(&weights)?;
    model.q.s_cov = header.s_cov as f64;
    let q = model.q;
    let n = header.anchor_count as usize;
    let k = header.k as usize;

    let cells = decode_cells(secs[0], n)?;
    let pmfs: FactorizedPmfs = model.fb.pmfs();
    let hyper_f_tables = factorized_tables(&pmfs.hyper_f)?;
    let hyper_g_tables = factorized_tables(&pmfs.hyper_g)?;

    let mut dec = RangeDecoder::new(secs[1])?;
    let mut hyper_f = Vec::with_capacity(n);
    for _ in 0..n {
        let mut h = [0i64; HYPER_F_DIM];
        for (v, t) in h.iter_mut().zip(&hyper_f_tables) {
            *v = t.decode(&mut dec)?;
        }
        hyper_f.push(h);
    }
    finish_section(dec, secs[1].len(), "hyper_f")?;

    let mut dec = RangeDecoder::new(secs[2])?;
    let mut embeddings = Vec::with_capacity(n);
    for h in &hyper_f {
        let params = model.entropy.ref_params(&h.map(|v| v as f64));
        let e: [i64; REF_DIM] = decode_gaussian(&mut dec, &params)?;
        embeddings.push(e.map(|v| dequantize(v, q.s_f)));
    }
    finish_section(dec, secs[2].len(), "f")?;

    let mut dec = RangeDecoder::new(secs[3])?;
    let mut anchors = Vec::with_capacity(n);
    for (a, f_hat) in embeddings.iter().enumerate() {
        let params = model.entropy.cov_params(f_hat, q.s_cov);
        let c: [i64; COV_DIM] = decode_gaussian(&mut dec, &params)?;
        let mut anchor = AnchorPrimitive {
            location: header.grid.dequantize(cells[a]),
            cov_scale: [0.0; 3],
            cov_rotation: [0.0; 4],
            ref_embedding: *f_hat,
        };
        anchor.set_cov_params(c.map(|v| dequantize(v, q.s_cov)));
        anchors.push(anchor);
    }
    finish_section(dec, secs[3].len(), "cov")?;

    let mut dec = RangeDecoder::new(secs[4])?;
    let mut hyper_g = Vec::with_capacity(n * k);
    for _ in 0..n * k {
        let mut h = [0i64; HYPER_G_DIM];
        for (v, t) in h.iter_mut().zip(&hyper_g_tables) {
            *v = t.decode(&mut dec)?;
        }
        hyper_g.push(h);
    }
    finish_section(dec, secs[4].len(), "hyper_g")?;

    let mut dec = RangeDecoder::new(secs[5])?;
    let mut coupled = Vec::with_capacity(n * k);
    for (i, h) in hyper_g.iter().enumerate() {
        let a = i / k;
        let params = model.entropy.res_params(&embeddings[a], &h.map(|v| v as f64));
        let g: [i64; RES_DIM] = decode_gaussian(&mut dec, &params)?;
        coupled.push(CoupledPrimitive {
            anchor_index: a,
            res_embedding: g.map(|v| dequantize(v, q.s_g)),
        });
    }
    finish_section(dec, secs[5].len(), "g")?;

    model.scene = Scene { anchors, coupled, k };
    Ok(DecodedScene { model, header, sizes })
}
