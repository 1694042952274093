use std::collections::BTreeMap;
use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use iclora::checkpoint::{save_adapter, save_model};
use iclora::dit::{init_params, ModelConfig};
use iclora::lora::{init_adapter, LoraConfig};
use iclora::sampler::{sample, SamplerConfig};
use iclora::tensor::Rng;
use iclora_ffi::*;

fn tiny() -> ModelConfig {
    ModelConfig {
        patch: 8,
        d_model: 16,
        heads: 2,
        blocks: 1,
        ..ModelConfig::default()
    }
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = iclora_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn write_model(dir: &Path) -> (CString, CString) {
    let params = init_params(&tiny(), &mut Rng::new(1)).unwrap();
    let base = dir.join("base.ckpt");
    save_model(&base, &params, None, &BTreeMap::new()).unwrap();
    let ad = init_adapter(&LoraConfig::all_projections(&tiny(), 2), &params, &mut Rng::new(2)).unwrap();
    let lora = dir.join("a.lora");
    save_adapter(&lora, &ad, &tiny(), None, &BTreeMap::new()).unwrap();
    (c(base.to_str().unwrap()), c(lora.to_str().unwrap()))
}

const PROMPT: &str = r#"{"overall":{"TASK":"palette","COLOR":"red"},"panels":[]}"#;

#[test]
fn generate_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (base, lora) = write_model(dir.path());
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(
            iclora_model_load(base.as_ptr(), lora.as_ptr(), &mut model),
            IcloraStatus::Ok
        );
        let mut img = ptr::null_mut();
        let st = iclora_generate(model, c(PROMPT).as_ptr(), c("2x2").as_ptr(), 7, 3, 3.5, &mut img);
        assert_eq!(st, IcloraStatus::Ok);
        assert_eq!((iclora_image_height(img), iclora_image_width(img)), (64, 64));
        assert_eq!(iclora_image_panel_count(img), 4);
        let mut buf = vec![0u8; 64 * 64 * 3];
        assert_eq!(iclora_image_rgb8(img, buf.as_mut_ptr(), buf.len()), IcloraStatus::Ok);

        // same result straight from the library
        let params = iclora::checkpoint::load_model(Path::new(base.to_str().unwrap()))
            .unwrap()
            .0;
        let ad = iclora::checkpoint::load_adapter(Path::new(lora.to_str().unwrap()))
            .unwrap()
            .0;
        let layout = iclora::canvas::PanelLayout::grid(2, 2).unwrap();
        let prog = iclora::prompt::PromptProgram::from_json(PROMPT).unwrap();
        let text = iclora::prompt::tokenize(&prog, &layout).unwrap();
        let cfg = SamplerConfig {
            steps: 3,
            guidance: 3.5,
            seed: 7,
        };
        let want = sample(&params, Some(&ad), &text, &cfg, &layout).unwrap();
        assert_eq!(buf, want.to_rgb8());

        let mut small = vec![0u8; 10];
        assert_eq!(
            iclora_image_rgb8(img, small.as_mut_ptr(), small.len()),
            IcloraStatus::BufferTooSmall
        );

        let out = dir.path().join("set");
        let out_c = c(out.to_str().unwrap());
        assert_eq!(iclora_image_save_set(img, out_c.as_ptr()), IcloraStatus::Ok);
        let pngs = std::fs::read_dir(&out)
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
            .count();
        assert_eq!(pngs, 5);

        // inpainting with nothing noised returns the reference
        let mut same = ptr::null_mut();
        let st = iclora_inpaint(model, ptr::null(), img, c("TL,BR").as_ptr(), 0.0, 1, 3, 3.5, &mut same);
        assert_eq!(st, IcloraStatus::Ok);
        let mut buf2 = vec![0u8; buf.len()];
        iclora_image_rgb8(same, buf2.as_mut_ptr(), buf2.len());
        assert_eq!(buf, buf2);
        let st = iclora_inpaint(
            model,
            ptr::null(),
            img,
            c("NOWHERE").as_ptr(),
            1.0,
            1,
            3,
            3.5,
            &mut same,
        );
        assert_ne!(st, IcloraStatus::Ok);
        assert!(same.is_null());

        let canvas = out.join("canvas.png");
        let mut loaded = ptr::null_mut();
        let st = iclora_image_load(c(canvas.to_str().unwrap()).as_ptr(), c("2x2").as_ptr(), &mut loaded);
        assert_eq!(st, IcloraStatus::Ok);
        iclora_image_rgb8(loaded, buf2.as_mut_ptr(), buf2.len());
        assert_eq!(buf, buf2);
        let st = iclora_image_load(c(canvas.to_str().unwrap()).as_ptr(), c("1x2").as_ptr(), &mut loaded);
        assert_eq!(st, IcloraStatus::Shape);
        assert!(loaded.is_null());

        iclora_image_free(img);
        iclora_image_free(same);
        iclora_model_free(model);
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(
            iclora_model_load(ptr::null(), ptr::null(), &mut model),
            IcloraStatus::NullPointer
        );
        assert!(last_error().contains("base_path"));
        let st = iclora_model_load(c("/no/such/file.ckpt").as_ptr(), ptr::null(), &mut model);
        assert_eq!(st, IcloraStatus::Io);
        assert!(model.is_null());
        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.ckpt");
        std::fs::write(&junk, b"not a checkpoint").unwrap();
        let st = iclora_model_load(c(junk.to_str().unwrap()).as_ptr(), ptr::null(), &mut model);
        assert_eq!(st, IcloraStatus::Format);
        assert!(last_error().contains("magic"));
        let mut img = ptr::null_mut();
        let st = iclora_generate(ptr::null(), ptr::null(), c("2x2").as_ptr(), 0, 3, 1.0, &mut img);
        assert_eq!(st, IcloraStatus::NullPointer);
        // freeing null is a no-op
        iclora_model_free(ptr::null_mut());
        iclora_image_free(ptr::null_mut());
        assert_eq!(iclora_image_height(ptr::null()), 0);
    }
}

#[test]
fn tokenize_through_the_abi() {
    let mut ids = [0u32; 64];
    let mut len = 0usize;
    unsafe {
        let st = iclora_tokenize(
            c(PROMPT).as_ptr(),
            c("2x2").as_ptr(),
            ids.as_mut_ptr(),
            ids.len(),
            &mut len,
        );
        assert_eq!(st, IcloraStatus::Ok);
        assert_eq!(len, iclora::prompt::TEXT_LEN);
        assert_eq!(ids[0], iclora::prompt::BOS as u32);
        let st = iclora_tokenize(c(PROMPT).as_ptr(), c("2x2").as_ptr(), ids.as_mut_ptr(), 4, &mut len);
        assert_eq!(st, IcloraStatus::BufferTooSmall);
        assert_eq!(len, iclora::prompt::TEXT_LEN);
        let st = iclora_tokenize(
            c("{").as_ptr(),
            c("2x2").as_ptr(),
            ids.as_mut_ptr(),
            ids.len(),
            &mut len,
        );
        assert_eq!(st, IcloraStatus::Format);
        let v = CStr::from_ptr(iclora_version()).to_str().unwrap();
        assert_eq!(v, env!("CARGO_PKG_VERSION"));
    }
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let text = std::fs::read_to_string(header.join("iclora.h")).unwrap();
    for f in [
        "iclora_model_load",
        "iclora_generate",
        "iclora_inpaint",
        "iclora_tokenize",
        "ICLORA_STATUS_OK",
    ] {
        assert!(text.contains(f), "header lacks {f}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        r#"#include "iclora.h"
int run(const char *base) {
    IcloraModel *m = 0;
    IcloraImage *img = 0;
    if (iclora_model_load(base, 0, &m) != ICLORA_STATUS_OK) return 1;
    enum IcloraStatus s = iclora_generate(m, 0, "2x2", 1, 20, 3.5, &img);
    size_t n = iclora_image_height(img) * iclora_image_width(img) * 3;
    (void)n;
    iclora_image_free(img);
    iclora_model_free(m);
    return s == ICLORA_STATUS_OK ? 0 : 2;
}
"#,
    )
    .unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = match Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&header)
        .arg(&src)
        .status()
    {
        Ok(s) => s,
        Err(e) => {
            eprintln!("skipping C compile check: {cc} unavailable ({e})");
            return;
        }
    };
    assert!(status.success());
}
