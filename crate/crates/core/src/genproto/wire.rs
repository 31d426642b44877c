//! JSON envelopes with content-addressed binary attachments, and the
//! per-role mapping between domain types and messages.
//!
//! Every call is `POST /v1/{role}` with an [`Envelope`]; each attachment is
//! uploaded beforehand with `PUT /v1/blobs/{sha256}` and fetched afterwards
//! with `GET /v1/blobs/{sha256}`. `GET /v1/version` reports the protocol
//! version and served roles. Failures carry an [`ErrorBody`].

use image::{GrayImage, RgbaImage};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{DenoiseRequest, GenError, Image3DResult, PROTOCOL_MAJOR};
use crate::framing2d::{InpaintRequest, TileImagePrompt};
use crate::isorender::{FrameKind, FramedImage, IsometricCamera, Provenance, SlabParams};
use crate::latentops::{
    encode_slat, read_slat, DenoiseStep, NoiseSchedule, SparseLatentVolume, VoxelFrame,
};
use crate::occupancy::{encode_occv, read_occv};
use crate::raster::{self, Mask, PixelRect};
use crate::splat::{encode_ply, read_ply, SplatSet};
use crate::worldspec::TileCoord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Encoding {
    PngRgba,
    PngGray,
    Ply,
    Occv,
    Slat,
    /// Little-endian `f32` array.
    F32le,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attachment {
    pub name: String,
    pub content_hash: String,
    pub encoding: Encoding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub protocol_version: String,
    pub request_id: String,
    #[serde(default)]
    pub params: Value,
    #[serde(default)]
    pub attachments: Vec<Attachment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorInfo {
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub protocol_version: String,
    pub request_id: String,
    pub error: ErrorInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionInfo {
    pub protocol_version: String,
    pub roles: Vec<String>,
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Accepts any version string with the supported major number.
pub fn check_version(version: &str) -> Result<(), GenError> {
    let major = version
        .split('.')
        .next()
        .and_then(|m| m.parse::<u32>().ok());
    if major == Some(PROTOCOL_MAJOR) {
        Ok(())
    } else {
        Err(GenError::Version {
            expected: super::PROTOCOL_VERSION.to_string(),
            got: version.to_string(),
        })
    }
}

pub fn error_kind(e: &GenError) -> &'static str {
    match e {
        GenError::Transport(_) => "transport",
        GenError::Protocol(_) => "protocol",
        GenError::Version { .. } => "version",
        GenError::Param(_) => "param",
        GenError::Expansion { .. } => "expansion",
        GenError::Decode(_) => "decode",
        GenError::Shape(_) => "shape",
        GenError::Remote { .. } => "remote",
        GenError::Unsupported(_) => "unsupported",
    }
}

/// A message with its attachments held in memory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Message {
    pub params: Value,
    pub blobs: Vec<(String, Encoding, Vec<u8>)>,
}

impl Message {
    pub fn new(params: Value) -> Self {
        Self {
            params,
            blobs: Vec::new(),
        }
    }

    pub fn attach(&mut self, name: impl Into<String>, encoding: Encoding, bytes: Vec<u8>) {
        self.blobs.push((name.into(), encoding, bytes));
    }

    pub fn blob(&self, name: &str) -> Result<&[u8], GenError> {
        self.blobs
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, b)| b.as_slice())
            .ok_or_else(|| GenError::Protocol(format!("missing attachment {name:?}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.blobs.iter().any(|(n, _, _)| n == name)
    }

    pub fn envelope(&self, request_id: &str, version: &str) -> Envelope {
        Envelope {
            protocol_version: version.to_string(),
            request_id: request_id.to_string(),
            params: self.params.clone(),
            attachments: self
                .blobs
                .iter()
                .map(|(name, encoding, bytes)| Attachment {
                    name: name.clone(),
                    content_hash: content_hash(bytes),
                    encoding: *encoding,
                })
                .collect(),
        }
    }

    pub fn param<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T, GenError> {
        let v = self.params.get(key).cloned().unwrap_or(Value::Null);
        serde_json::from_value(v).map_err(|e| GenError::Protocol(format!("param {key:?}: {e}")))
    }
}

fn decode_err(e: impl std::fmt::Display) -> GenError {
    GenError::Decode(e.to_string())
}

fn rgba(msg: &Message, name: &str) -> Result<RgbaImage, GenError> {
    raster::decode_png_rgba(msg.blob(name)?).map_err(decode_err)
}

fn gray(msg: &Message, name: &str) -> Result<GrayImage, GenError> {
    raster::decode_png_gray(msg.blob(name)?).map_err(decode_err)
}

fn latents(msg: &Message, name: &str, frame: VoxelFrame) -> Result<SparseLatentVolume, GenError> {
    Ok(read_slat(msg.blob(name)?)
        .map_err(decode_err)?
        .with_frame(frame))
}

#[derive(Serialize, Deserialize)]
struct FrameMeta {
    camera: IsometricCamera,
    kind: FrameKind,
    provenance: Option<Provenance>,
    matte: bool,
}

/// Attaches `name` (pixels), `name.mask` and optionally `name.matte`;
/// returns the metadata to embed in params.
pub fn put_frame(msg: &mut Message, name: &str, img: &FramedImage) -> Value {
    msg.attach(
        name,
        Encoding::PngRgba,
        raster::encode_png_rgba(&img.pixels),
    );
    msg.attach(
        format!("{name}.mask"),
        Encoding::PngGray,
        raster::encode_png_gray(&img.mask.to_gray()),
    );
    if let Some(m) = &img.matte {
        msg.attach(
            format!("{name}.matte"),
            Encoding::PngGray,
            raster::encode_png_gray(m),
        );
    }
    serde_json::to_value(FrameMeta {
        camera: img.camera,
        kind: img.kind,
        provenance: img.provenance.clone(),
        matte: img.matte.is_some(),
    })
    .expect("serializable")
}

pub fn get_frame(msg: &Message, name: &str, meta: &Value) -> Result<FramedImage, GenError> {
    let meta: FrameMeta = serde_json::from_value(meta.clone())
        .map_err(|e| GenError::Protocol(format!("frame {name:?}: {e}")))?;
    let pixels = rgba(msg, name)?;
    let mask = Mask::from_gray(&gray(msg, &format!("{name}.mask"))?);
    let matte = if meta.matte {
        Some(gray(msg, &format!("{name}.matte"))?)
    } else {
        None
    };
    if mask.dimensions() != pixels.dimensions()
        || matte
            .as_ref()
            .is_some_and(|m| m.dimensions() != pixels.dimensions())
    {
        return Err(GenError::Shape(format!(
            "frame {name:?} rasters differ in size"
        )));
    }
    Ok(FramedImage {
        pixels,
        mask,
        camera: meta.camera,
        kind: meta.kind,
        provenance: meta.provenance,
        matte,
    })
}

pub fn expand_request(seed_prompt: &str, width: u32, height: u32, instruction: &str) -> Message {
    Message::new(
        json!({ "seed_prompt": seed_prompt, "width": width, "height": height, "instruction": instruction }),
    )
}

pub fn inpaint_request(req: &InpaintRequest) -> Message {
    let mut msg = Message::default();
    let base = put_frame(&mut msg, "base", &req.base);
    msg.attach(
        "mask",
        Encoding::PngGray,
        raster::encode_png_gray(&req.mask.to_gray()),
    );
    msg.params = json!({ "prompt": req.prompt, "seed": req.seed, "base": base });
    msg
}

pub fn decode_inpaint_request(msg: &Message) -> Result<InpaintRequest, GenError> {
    let base = get_frame(msg, "base", &msg.params["base"])?;
    let mask = Mask::from_gray(&gray(msg, "mask")?);
    Ok(InpaintRequest {
        base,
        mask,
        prompt: msg.param("prompt")?,
        seed: msg.param("seed")?,
    })
}

pub fn frame_message(img: &FramedImage) -> Message {
    let mut msg = Message::default();
    let meta = put_frame(&mut msg, "image", img);
    msg.params = json!({ "image": meta });
    msg
}

pub fn decode_frame_message(msg: &Message) -> Result<FramedImage, GenError> {
    get_frame(msg, "image", &msg.params["image"])
}

#[derive(Serialize, Deserialize)]
struct PromptMeta {
    rect: PixelRect,
    camera: IsometricCamera,
    tile: TileCoord,
    slab: SlabParams,
    provenance: Option<Provenance>,
    seed: u64,
    attempt: u32,
}

pub fn image_to_3d_request(prompt: &TileImagePrompt, seed: u64, attempt: u32) -> Message {
    let meta = PromptMeta {
        rect: prompt.rect,
        camera: prompt.camera,
        tile: prompt.tile,
        slab: prompt.slab,
        provenance: prompt.provenance.clone(),
        seed,
        attempt,
    };
    let mut msg = Message::new(serde_json::to_value(meta).expect("serializable"));
    msg.attach(
        "image",
        Encoding::PngRgba,
        raster::encode_png_rgba(&prompt.image),
    );
    msg
}

pub fn decode_image_to_3d_request(msg: &Message) -> Result<(TileImagePrompt, u64, u32), GenError> {
    let meta: PromptMeta = serde_json::from_value(msg.params.clone())
        .map_err(|e| GenError::Protocol(e.to_string()))?;
    let prompt = TileImagePrompt {
        image: rgba(msg, "image")?,
        rect: meta.rect,
        camera: meta.camera,
        tile: meta.tile,
        slab: meta.slab,
        provenance: meta.provenance,
    };
    Ok((prompt, meta.seed, meta.attempt))
}

pub fn image_3d_response(result: &Image3DResult) -> Result<Message, GenError> {
    let mut msg = Message::new(json!({ "seed": result.seed, "frame": result.latents.frame }));
    msg.attach("splats", Encoding::Ply, encode_ply(&result.splats));
    msg.attach(
        "occupancy",
        Encoding::Occv,
        encode_occv(&result.occupancy).map_err(decode_err)?,
    );
    msg.attach(
        "latents",
        Encoding::Slat,
        encode_slat(&result.latents).map_err(decode_err)?,
    );
    Ok(msg)
}

pub fn decode_image_3d_response(msg: &Message) -> Result<Image3DResult, GenError> {
    let frame: VoxelFrame = msg.param("frame")?;
    let result = Image3DResult {
        splats: read_ply(msg.blob("splats")?).map_err(decode_err)?,
        occupancy: read_occv(msg.blob("occupancy")?).map_err(decode_err)?,
        latents: latents(msg, "latents", frame)?,
        seed: msg.param("seed")?,
    };
    result.check()?;
    Ok(result)
}

pub fn denoise_request(req: &DenoiseRequest) -> Result<Message, GenError> {
    let mut msg = Message::default();
    msg.attach(
        "latents",
        Encoding::Slat,
        encode_slat(&req.latents).map_err(decode_err)?,
    );
    let views: Vec<Value> = req
        .views
        .iter()
        .enumerate()
        .map(|(i, v)| put_frame(&mut msg, &format!("view{i}"), v))
        .collect();
    if let Some(r) = &req.reference {
        msg.attach(
            "reference",
            Encoding::Slat,
            encode_slat(r).map_err(decode_err)?,
        );
    }
    msg.params = json!({
        "op": "step",
        "step": req.step,
        "schedule": req.schedule,
        "frame": req.latents.frame,
        "views": views,
        "reference": req.reference.is_some(),
    });
    Ok(msg)
}

pub fn decode_denoise_request(msg: &Message) -> Result<DenoiseRequest, GenError> {
    let frame: VoxelFrame = msg.param("frame")?;
    let metas: Vec<Value> = msg.param("views")?;
    let views = metas
        .iter()
        .enumerate()
        .map(|(i, m)| get_frame(msg, &format!("view{i}"), m))
        .collect::<Result<_, _>>()?;
    let reference = if msg.param::<bool>("reference")? {
        Some(latents(msg, "reference", frame)?)
    } else {
        None
    };
    let schedule: NoiseSchedule = msg.param("schedule")?;
    Ok(DenoiseRequest {
        latents: latents(msg, "latents", frame)?,
        step: msg.param("step")?,
        schedule,
        views,
        reference,
    })
}

pub fn f32le(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn read_f32le(bytes: &[u8]) -> Result<Vec<f32>, GenError> {
    if bytes.len() % 4 != 0 {
        return Err(GenError::Decode(format!(
            "f32 array of {} bytes",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn denoise_response(out: &DenoiseStep) -> Result<Message, GenError> {
    let mut msg =
        Message::new(json!({ "frame": out.latents.frame, "weights": out.weights.is_some() }));
    msg.attach(
        "latents",
        Encoding::Slat,
        encode_slat(&out.latents).map_err(decode_err)?,
    );
    if let Some(w) = &out.weights {
        msg.attach("weights", Encoding::F32le, f32le(w));
    }
    Ok(msg)
}

pub fn decode_denoise_response(msg: &Message) -> Result<DenoiseStep, GenError> {
    let frame: VoxelFrame = msg.param("frame")?;
    let weights = if msg.param::<bool>("weights")? {
        Some(read_f32le(msg.blob("weights")?)?)
    } else {
        None
    };
    Ok(DenoiseStep {
        latents: latents(msg, "latents", frame)?,
        weights,
    })
}

pub fn decode_request(volume: &SparseLatentVolume) -> Result<Message, GenError> {
    let mut msg = Message::new(json!({ "op": "decode", "frame": volume.frame }));
    msg.attach(
        "latents",
        Encoding::Slat,
        encode_slat(volume).map_err(decode_err)?,
    );
    Ok(msg)
}

pub fn decode_decode_request(msg: &Message) -> Result<SparseLatentVolume, GenError> {
    latents(msg, "latents", msg.param("frame")?)
}

pub fn splats_message(splats: &SplatSet) -> Message {
    let mut msg = Message::new(json!({}));
    msg.attach("splats", Encoding::Ply, encode_ply(splats));
    msg
}

pub fn decode_splats_message(msg: &Message) -> Result<SplatSet, GenError> {
    read_ply(msg.blob("splats")?).map_err(decode_err)
}

pub fn image_message(img: &RgbaImage) -> Message {
    let mut msg = Message::new(json!({}));
    msg.attach("image", Encoding::PngRgba, raster::encode_png_rgba(img));
    msg
}

pub fn decode_image_message(msg: &Message) -> Result<RgbaImage, GenError> {
    rgba(msg, "image")
}

pub fn distance_request(a: &RgbaImage, b: &RgbaImage) -> Message {
    let mut msg = Message::new(json!({}));
    msg.attach("a", Encoding::PngRgba, raster::encode_png_rgba(a));
    msg.attach("b", Encoding::PngRgba, raster::encode_png_rgba(b));
    msg
}

pub fn decode_distance_request(msg: &Message) -> Result<(RgbaImage, RgbaImage), GenError> {
    Ok((rgba(msg, "a")?, rgba(msg, "b")?))
}
