use std::ffi::{CStr, CString};
use std::ptr;

use dde_core::checkpoint::Checkpoint;
use dde_core::dde::DdeModel;
use dde_core::diffengine::Mat;
use dde_core::generator::GeneratorModel;
use dde_core::network::MlpConfig;
use dde_core::samplers;
use dde_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(dde_last_error_message()).to_string_lossy().into_owned() }
}

fn saved_dde(dir: &tempfile::TempDir) -> (DdeModel, CString) {
    let model = DdeModel::init(MlpConfig::dde(2, 2, 8), 0.3, 5).unwrap();
    let path = dir.path().join("dde.json");
    Checkpoint::from_dde(&model, 5, None).save(&path).unwrap();
    (model, CString::new(path.to_str().unwrap()).unwrap())
}

fn saved_generator(dir: &tempfile::TempDir) -> (GeneratorModel, CString) {
    let gen = GeneratorModel::init(MlpConfig::generator(3, 2, 2, 8), 9).unwrap();
    let path = dir.path().join("gen.json");
    Checkpoint::from_generator(&gen, 9, None).save(&path).unwrap();
    (gen, CString::new(path.to_str().unwrap()).unwrap())
}

#[test]
fn model_calls_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (model, path) = saved_dde(&dir);
    let mut h = ptr::null_mut();
    unsafe {
        assert_eq!(dde_model_load(path.as_ptr(), &mut h), DdeStatus::Ok);
        assert_eq!(dde_model_dim(h), 2);
        assert_eq!(dde_model_sigma_eta(h), 0.3);
        let x = [0.5, -1.0, 2.0, 0.25, 0.0, 0.0];
        let rows = Mat::from_vec(3, 2, x.to_vec()).unwrap();

        let mut ld = [0.0; 3];
        assert_eq!(dde_model_log_density(h, x.as_ptr(), 3, ld.as_mut_ptr()), DdeStatus::Ok);
        assert_eq!(ld.to_vec(), model.log_density_batch(&rows).unwrap());

        let mut g = [0.0; 6];
        assert_eq!(dde_model_score(h, x.as_ptr(), 3, g.as_mut_ptr()), DdeStatus::Ok);
        assert_eq!(&g[..], model.score_batch(&rows).unwrap().as_slice());

        let mut d = [0.0; 6];
        assert_eq!(dde_model_denoise(h, x.as_ptr(), 3, d.as_mut_ptr()), DdeStatus::Ok);
        for i in 0..6 {
            assert!((d[i] - (x[i] + 0.09 * g[i])).abs() < 1e-12);
        }
        dde_model_free(h);
    }
}

#[test]
fn generator_calls_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (gen, path) = saved_generator(&dir);
    let mut h = ptr::null_mut();
    unsafe {
        assert_eq!(dde_generator_load(path.as_ptr(), &mut h), DdeStatus::Ok);
        assert_eq!((dde_generator_latent_dim(h), dde_generator_dim(h)), (3, 2));
        let mut out = vec![0.0; 20];
        assert_eq!(dde_generator_sample(h, 10, 42, out.as_mut_ptr()), DdeStatus::Ok);
        assert_eq!(out, samplers::sample_direct(&gen, 10, 42).unwrap().points.into_vec());

        let z = [0.1, 0.2, 0.3];
        let mut x = [0.0; 2];
        assert_eq!(dde_generator_forward(h, z.as_ptr(), 1, x.as_mut_ptr()), DdeStatus::Ok);
        assert_eq!(x.to_vec(), gen.forward(&Mat::from_vec(1, 3, z.to_vec()).unwrap()).unwrap().into_vec());
        dde_generator_free(h);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    let dir = tempfile::tempdir().unwrap();
    let (_, gen_path) = saved_generator(&dir);
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(dde_model_load(gen_path.as_ptr(), &mut m), DdeStatus::WrongKind);
        assert!(last_error().contains("generator"), "{}", last_error());
        assert!(m.is_null());

        let missing = CString::new(dir.path().join("absent.json").to_str().unwrap()).unwrap();
        assert_eq!(dde_model_load(missing.as_ptr(), &mut m), DdeStatus::Io);
        assert!(last_error().contains("absent.json"));

        assert_eq!(dde_model_load(ptr::null(), &mut m), DdeStatus::NullPointer);
        assert_eq!(dde_model_load(missing.as_ptr(), ptr::null_mut()), DdeStatus::NullPointer);

        let mut out = [0.0; 1];
        let x = [0.0; 2];
        assert_eq!(dde_model_log_density(ptr::null(), x.as_ptr(), 1, out.as_mut_ptr()), DdeStatus::NullPointer);
        assert_eq!(dde_model_dim(ptr::null()), 0);
        assert!(dde_model_sigma_eta(ptr::null()).is_nan());
        dde_model_free(ptr::null_mut());

        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, "{not json").unwrap();
        let bad = CString::new(bad.to_str().unwrap()).unwrap();
        assert_eq!(dde_model_load(bad.as_ptr(), &mut m), DdeStatus::Config);
    }
}

#[test]
fn zero_rows_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (_, path) = saved_dde(&dir);
    let mut h = ptr::null_mut();
    unsafe {
        assert_eq!(dde_model_load(path.as_ptr(), &mut h), DdeStatus::Ok);
        let x = [0.0; 2];
        let mut out = [0.0; 1];
        assert_eq!(dde_model_log_density(h, x.as_ptr(), 0, out.as_mut_ptr()), DdeStatus::InvalidArgument);
        dde_model_free(h);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/dde.h")).unwrap();
    for name in [
        "dde_model_load",
        "dde_model_free",
        "dde_model_log_density",
        "dde_model_score",
        "dde_model_denoise",
        "dde_generator_load",
        "dde_generator_sample",
        "dde_last_error_message",
        "typedef struct DdeModelHandle DdeModelHandle",
        "DDE_STATUS_WRONG_KIND",
    ] {
        assert!(header.contains(name), "missing {name}");
    }
    let version = unsafe { CStr::from_ptr(dde_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}
