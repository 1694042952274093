//! C ABI over the iclora pipeline.
//!
//! Models and images are opaque handles created by `*_load` / sampling calls
//! and released with the matching `*_free`. Every fallible call returns an
//! [`IcloraStatus`]; on failure a message is available from
//! [`iclora_last_error`] on the same thread until the next failing call.
//! Strings are NUL-terminated UTF-8. Panics never cross the boundary.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use iclora::canvas::{Canvas, PanelLayout, PanelMask};
use iclora::checkpoint::{load_adapter, load_model};
use iclora::dit::ModelParams;
use iclora::lora::LoraAdapter;
use iclora::output::write_set;
use iclora::prompt::{null_prompt, tokenize, PromptProgram, TokenSeq};
use iclora::sampler::{sample, sdedit_inpaint, InpaintSpec, SamplerConfig};
use iclora::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IcloraStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Numeric = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// A loaded base model with an optional adapter.
pub struct IcloraModel {
    params: ModelParams,
    adapter: Option<LoraAdapter>,
}

/// A composed canvas with its panel layout.
pub struct IcloraImage {
    canvas: Canvas,
    layout: PanelLayout,
    prompt: Option<PromptProgram>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> IcloraStatus {
    match e {
        Error::Io { .. } | Error::Png { .. } => IcloraStatus::Io,
        Error::Format(_) | Error::Json(_) | Error::Parse { .. } | Error::UnknownToken(_) => IcloraStatus::Format,
        Error::Shape { .. } | Error::Dimension(_) | Error::OutOfRange { .. } => IcloraStatus::Shape,
        Error::NonFinite { .. } | Error::Diverged { .. } | Error::UndefinedMetric(_) => IcloraStatus::Numeric,
        _ => IcloraStatus::InvalidArgument,
    }
}

enum Fail {
    Status(IcloraStatus, String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> IcloraStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => IcloraStatus::Ok,
        Ok(Err(Fail::Status(s, m))) => {
            set_error(m);
            s
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            IcloraStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail::Status(IcloraStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Status(IcloraStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Fail> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, what).map(Some)
    }
}

unsafe fn out_arg<T>(out: *mut *mut T) -> Result<&'static mut *mut T, Fail> {
    out.as_mut().ok_or_else(|| null("output pointer"))
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn iclora_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn iclora_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a base checkpoint and, if `lora_path` is not null, an adapter.
#[no_mangle]
pub unsafe extern "C" fn iclora_model_load(
    base_path: *const c_char,
    lora_path: *const c_char,
    out: *mut *mut IcloraModel,
) -> IcloraStatus {
    guard(|| {
        let out = out_arg(out)?;
        *out = ptr::null_mut();
        let (params, _, _) = load_model(Path::new(str_arg(base_path, "base_path")?))?;
        let adapter = match opt_str_arg(lora_path, "lora_path")? {
            Some(p) => {
                let a = load_adapter(Path::new(p))?.0;
                a.check_against(&params)?;
                Some(a)
            }
            None => None,
        };
        *out = Box::into_raw(Box::new(IcloraModel { params, adapter }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn iclora_model_free(model: *mut IcloraModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn prompt_tokens(
    prompt_json: *const c_char,
    layout: &PanelLayout,
) -> Result<(Option<PromptProgram>, TokenSeq), Fail> {
    match opt_str_arg(prompt_json, "prompt_json")? {
        Some(s) => {
            let p = PromptProgram::from_json(s)?;
            let t = tokenize(&p, layout)?;
            Ok((Some(p), t))
        }
        None => Ok((None, null_prompt())),
    }
}

fn sampler(seed: u64, steps: u32, guidance: f64) -> Result<SamplerConfig, Fail> {
    let cfg = SamplerConfig {
        steps: steps as usize,
        guidance,
        seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Samples one image set. `prompt_json` may be null for the unconditional
/// prompt; `layout` is e.g. "2x2".
#[no_mangle]
pub unsafe extern "C" fn iclora_generate(
    model: *const IcloraModel,
    prompt_json: *const c_char,
    layout: *const c_char,
    seed: u64,
    steps: u32,
    guidance: f64,
    out: *mut *mut IcloraImage,
) -> IcloraStatus {
    guard(|| {
        let out = out_arg(out)?;
        *out = ptr::null_mut();
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let layout = PanelLayout::parse(str_arg(layout, "layout")?)?;
        let (prompt, text) = prompt_tokens(prompt_json, &layout)?;
        let canvas = sample(
            &m.params,
            m.adapter.as_ref(),
            &text,
            &sampler(seed, steps, guidance)?,
            &layout,
        )?;
        *out = Box::into_raw(Box::new(IcloraImage { canvas, layout, prompt }));
        Ok(())
    })
}

/// Regenerates the panels named in `mask` (e.g. "TR,BR") of `reference`.
#[no_mangle]
pub unsafe extern "C" fn iclora_inpaint(
    model: *const IcloraModel,
    prompt_json: *const c_char,
    reference: *const IcloraImage,
    mask: *const c_char,
    strength: f64,
    seed: u64,
    steps: u32,
    guidance: f64,
    out: *mut *mut IcloraImage,
) -> IcloraStatus {
    guard(|| {
        let out = out_arg(out)?;
        *out = ptr::null_mut();
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let r = reference.as_ref().ok_or_else(|| null("reference"))?;
        let mask = PanelMask::parse(r.layout.clone(), str_arg(mask, "mask")?)?;
        if mask.is_empty() {
            return Err(Fail::Status(
                IcloraStatus::InvalidArgument,
                "mask selects no panels".into(),
            ));
        }
        let (prompt, text) = prompt_tokens(prompt_json, &r.layout)?;
        let spec = InpaintSpec {
            strength,
            ..InpaintSpec::new(r.canvas.clone(), mask)
        };
        let canvas = sdedit_inpaint(
            &m.params,
            m.adapter.as_ref(),
            &text,
            &spec,
            &sampler(seed, steps, guidance)?,
        )?;
        *out = Box::into_raw(Box::new(IcloraImage {
            canvas,
            layout: r.layout.clone(),
            prompt,
        }));
        Ok(())
    })
}

/// Loads a canvas PNG to be read with `layout`.
#[no_mangle]
pub unsafe extern "C" fn iclora_image_load(
    path: *const c_char,
    layout: *const c_char,
    out: *mut *mut IcloraImage,
) -> IcloraStatus {
    guard(|| {
        let out = out_arg(out)?;
        *out = ptr::null_mut();
        let layout = PanelLayout::parse(str_arg(layout, "layout")?)?;
        let canvas = Canvas::load_png(str_arg(path, "path")?)?;
        if (canvas.height(), canvas.width()) != (layout.height(), layout.width()) {
            return Err(Fail::Status(
                IcloraStatus::Shape,
                format!(
                    "canvas is {}x{}, layout needs {}x{}",
                    canvas.height(),
                    canvas.width(),
                    layout.height(),
                    layout.width()
                ),
            ));
        }
        *out = Box::into_raw(Box::new(IcloraImage {
            canvas,
            layout,
            prompt: None,
        }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn iclora_image_free(image: *mut IcloraImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// Canvas height in pixels, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn iclora_image_height(image: *const IcloraImage) -> usize {
    image.as_ref().map_or(0, |i| i.canvas.height())
}

#[no_mangle]
pub unsafe extern "C" fn iclora_image_width(image: *const IcloraImage) -> usize {
    image.as_ref().map_or(0, |i| i.canvas.width())
}

#[no_mangle]
pub unsafe extern "C" fn iclora_image_panel_count(image: *const IcloraImage) -> usize {
    image.as_ref().map_or(0, |i| i.layout.len())
}

/// Copies interleaved 8-bit RGB rows into `buf`, which must hold
/// `height * width * 3` bytes.
#[no_mangle]
pub unsafe extern "C" fn iclora_image_rgb8(image: *const IcloraImage, buf: *mut u8, len: usize) -> IcloraStatus {
    guard(|| {
        let i = image.as_ref().ok_or_else(|| null("image"))?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let bytes = i.canvas.to_rgb8();
        if len < bytes.len() {
            return Err(Fail::Status(
                IcloraStatus::BufferTooSmall,
                format!("need {} bytes, got {len}", bytes.len()),
            ));
        }
        ptr::copy_nonoverlapping(bytes.as_ptr(), buf, bytes.len());
        Ok(())
    })
}

/// Writes the whole canvas to one PNG file.
#[no_mangle]
pub unsafe extern "C" fn iclora_image_save_png(image: *const IcloraImage, path: *const c_char) -> IcloraStatus {
    guard(|| {
        let i = image.as_ref().ok_or_else(|| null("image"))?;
        i.canvas.save_png(str_arg(path, "path")?)?;
        Ok(())
    })
}

/// Writes `canvas.png`, one `panel_<MARKER>.png` per panel and `set.json`
/// into `dir`.
#[no_mangle]
pub unsafe extern "C" fn iclora_image_save_set(image: *const IcloraImage, dir: *const c_char) -> IcloraStatus {
    guard(|| {
        let i = image.as_ref().ok_or_else(|| null("image"))?;
        write_set(Path::new(str_arg(dir, "dir")?), &i.canvas, &i.layout, i.prompt.as_ref())?;
        Ok(())
    })
}

/// Tokenizes a prompt program for `layout`. Writes up to `capacity` ids and
/// the full sequence length to `out_len`; fails with `BufferTooSmall` when
/// the sequence does not fit.
#[no_mangle]
pub unsafe extern "C" fn iclora_tokenize(
    prompt_json: *const c_char,
    layout: *const c_char,
    out_ids: *mut u32,
    capacity: usize,
    out_len: *mut usize,
) -> IcloraStatus {
    guard(|| {
        let out_len = out_len.as_mut().ok_or_else(|| null("out_len"))?;
        let layout = PanelLayout::parse(str_arg(layout, "layout")?)?;
        let p = PromptProgram::from_json(str_arg(prompt_json, "prompt_json")?)?;
        let ids = tokenize(&p, &layout)?;
        *out_len = ids.ids().len();
        if ids.ids().len() > capacity {
            return Err(Fail::Status(
                IcloraStatus::BufferTooSmall,
                format!("need room for {} ids", ids.ids().len()),
            ));
        }
        if out_ids.is_null() {
            return Err(null("out_ids"));
        }
        for (k, &id) in ids.ids().iter().enumerate() {
            *out_ids.add(k) = id as u32;
        }
        Ok(())
    })
}
