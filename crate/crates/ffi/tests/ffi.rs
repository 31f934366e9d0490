use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use viap::attacks::{self, AttackConfig, AttackFamily, IterativeParams, PIXEL_SCALE};
use viap::{classifier, net, verify, ModelParams, Tensor};
use viap_ffi::*;

const SIDE: usize = 8;
const CHANNELS: usize = 3;
const CLASSES: usize = 4;
const LEN: usize = SIDE * SIDE * CHANNELS;

struct Fixture {
    _dir: tempfile::TempDir,
    path: CString,
    params: ModelParams,
    images: Vec<Tensor>,
}

fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = verify::random_model(&mut rng, SIDE, CHANNELS, CLASSES, false);
    let images = verify::random_images(&mut rng, 3, SIDE, CHANNELS).unstack();
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("params.bin");
    params.save(&file).unwrap();
    Fixture {
        path: cstring(&file),
        _dir: dir,
        params,
        images,
    }
}

fn cstring(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = viap_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn load(f: &Fixture) -> *mut ViapModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { viap_model_load(f.path.as_ptr(), &mut m) }, ViapStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn model_info_matches_architecture() {
    let f = fixture(1);
    let m = load(&f);
    let (mut h, mut w, mut c, mut k) = (0, 0, 0, 0);
    assert_eq!(
        unsafe { viap_model_info(m, &mut h, &mut w, &mut c, &mut k) },
        ViapStatus::Ok
    );
    assert_eq!((h, w, c, k), (SIDE, SIDE, CHANNELS, CLASSES));
    assert_eq!(
        unsafe { viap_model_info(m, ptr::null_mut(), ptr::null_mut(), ptr::null_mut(), &mut k) },
        ViapStatus::Ok
    );
    unsafe { viap_model_free(m) };
}

#[test]
fn predict_matches_library() {
    let f = fixture(2);
    let m = load(&f);
    let flat: Vec<f64> = f.images.iter().flat_map(|t| t.data().to_vec()).collect();
    let mut probs = vec![0.0; f.images.len() * CLASSES];
    let status = unsafe { viap_predict(m, flat.as_ptr(), f.images.len(), probs.as_mut_ptr(), probs.len()) };
    assert_eq!(status, ViapStatus::Ok);
    let refs: Vec<&Tensor> = f.images.iter().collect();
    assert_eq!(probs, classifier::predict(&f.params, &refs).unwrap().data());
    unsafe { viap_model_free(m) };
}

#[test]
fn input_gradient_matches_library() {
    let f = fixture(3);
    let m = load(&f);
    let x = &f.images[0];
    let mut grad = vec![0.0; LEN];
    let mut loss = 0.0;
    let status = unsafe { viap_input_gradient(m, x.data().as_ptr(), LEN, 2, grad.as_mut_ptr(), LEN, &mut loss) };
    assert_eq!(status, ViapStatus::Ok);
    let (l, g) = net::loss_and_input_grad(&f.params, &Tensor::stack(&[x]).unwrap(), &[2]).unwrap();
    assert_eq!(loss, l);
    assert_eq!(grad, g.data());
    unsafe { viap_model_free(m) };
}

#[test]
fn per_image_attacks_match_library() {
    let f = fixture(4);
    let m = load(&f);
    let x = &f.images[1];
    let mut out = vec![0.0; LEN];

    let s = unsafe {
        viap_attack_image(
            m,
            x.data().as_ptr(),
            LEN,
            1,
            ViapFamily::Fgsm as i32,
            8.0,
            0,
            -1,
            out.as_mut_ptr(),
            LEN,
        )
    };
    assert_eq!(s, ViapStatus::Ok);
    assert_eq!(out, attacks::fgsm(&f.params, x, 1, 8.0 / PIXEL_SCALE).unwrap().data());

    let s = unsafe {
        viap_attack_image(
            m,
            x.data().as_ptr(),
            LEN,
            1,
            ViapFamily::BimTargeted as i32,
            5.0,
            4,
            3,
            out.as_mut_ptr(),
            LEN,
        )
    };
    assert_eq!(s, ViapStatus::Ok);
    let config = AttackConfig::new(AttackFamily::BimTargeted, 5.0)
        .with_iterations(4)
        .with_target(3);
    let expected = attacks::bim(&f.params, x, 1, &IterativeParams::from_config(&config)).unwrap();
    assert_eq!(out, expected.data());
    unsafe { viap_model_free(m) };
}

#[test]
fn craft_save_load_apply_round_trip() {
    let f = fixture(5);
    let m = load(&f);
    let flat: Vec<f64> = f.images.iter().flat_map(|t| t.data().to_vec()).collect();
    let labels = [0usize, 1, 1];
    let mut p = ptr::null_mut();
    let s = unsafe {
        viap_craft(
            m,
            flat.as_ptr(),
            3,
            LEN,
            labels.as_ptr(),
            ViapFamily::Viap as i32,
            6.0,
            5,
            -1,
            42,
            &mut p,
        )
    };
    assert_eq!(s, ViapStatus::Ok, "{}", last_error());

    let config = AttackConfig::new(AttackFamily::Viap, 6.0)
        .with_iterations(5)
        .with_seed(42);
    let views: Vec<(&Tensor, usize)> = f.images.iter().zip(labels).collect();
    let keys = (0..3).map(|i| format!("input{i}")).collect();
    let expected = attacks::viap(&f.params, &views, keys, &config).unwrap();

    let mut len = 0;
    assert_eq!(unsafe { viap_perturbation_len(p, &mut len) }, ViapStatus::Ok);
    assert_eq!(len, LEN);
    let mut delta = vec![0.0; LEN];
    assert_eq!(
        unsafe { viap_perturbation_delta(p, delta.as_mut_ptr(), LEN) },
        ViapStatus::Ok
    );
    assert_eq!(delta, expected.delta.data());

    let dir = tempfile::tempdir().unwrap();
    let file = cstring(&dir.path().join("delta.bin"));
    assert_eq!(unsafe { viap_perturbation_save(p, file.as_ptr()) }, ViapStatus::Ok);
    let mut q = ptr::null_mut();
    assert_eq!(unsafe { viap_perturbation_load(file.as_ptr(), &mut q) }, ViapStatus::Ok);

    let mut applied = vec![0.0; LEN];
    let x = &f.images[2];
    assert_eq!(
        unsafe { viap_perturbation_apply(q, x.data().as_ptr(), LEN, applied.as_mut_ptr(), LEN) },
        ViapStatus::Ok
    );
    assert_eq!(applied, expected.apply(x).unwrap().data());
    unsafe {
        viap_perturbation_free(p);
        viap_perturbation_free(q);
        viap_model_free(m);
    }
}

#[test]
fn null_pointers_are_reported() {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { viap_model_load(ptr::null(), &mut m) }, ViapStatus::NullPointer);
    assert!(last_error().contains("path"));
    let mut probs = [0.0; CLASSES];
    assert_eq!(
        unsafe { viap_predict(ptr::null(), probs.as_ptr(), 1, probs.as_mut_ptr(), CLASSES) },
        ViapStatus::NullPointer
    );
    unsafe {
        viap_model_free(ptr::null_mut());
        viap_perturbation_free(ptr::null_mut());
    }
}

#[test]
fn io_and_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = cstring(&dir.path().join("absent.bin"));
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { viap_model_load(missing.as_ptr(), &mut m) }, ViapStatus::Io);
    assert!(!last_error().is_empty());

    let junk: PathBuf = dir.path().join("junk.bin");
    std::fs::write(&junk, b"not a model").unwrap();
    let junk = cstring(&junk);
    assert_eq!(unsafe { viap_model_load(junk.as_ptr(), &mut m) }, ViapStatus::Format);
    assert!(m.is_null());
}

#[test]
fn argument_errors() {
    let f = fixture(6);
    let m = load(&f);
    let x = f.images[0].data();
    let mut out = vec![0.0; LEN];

    let s = unsafe {
        viap_attack_image(
            m,
            x.as_ptr(),
            LEN,
            0,
            ViapFamily::Fgsm as i32,
            4.0,
            0,
            -1,
            out.as_mut_ptr(),
            LEN - 1,
        )
    };
    assert_eq!(s, ViapStatus::BufferSize);
    assert!(last_error().contains("expected"));

    let s = unsafe { viap_attack_image(m, x.as_ptr(), LEN, 0, 17, 4.0, 0, -1, out.as_mut_ptr(), LEN) };
    assert_eq!(s, ViapStatus::InvalidArgument);

    let s = unsafe {
        viap_attack_image(
            m,
            x.as_ptr(),
            LEN,
            0,
            ViapFamily::Viap as i32,
            4.0,
            0,
            -1,
            out.as_mut_ptr(),
            LEN,
        )
    };
    assert_eq!(s, ViapStatus::InvalidArgument);

    let s = unsafe {
        viap_attack_image(
            m,
            x.as_ptr(),
            LEN,
            9,
            ViapFamily::Fgsm as i32,
            4.0,
            0,
            -1,
            out.as_mut_ptr(),
            LEN,
        )
    };
    assert_eq!(s, ViapStatus::LabelOutOfRange);

    let s = unsafe {
        viap_attack_image(
            m,
            x.as_ptr(),
            LEN - 3,
            0,
            ViapFamily::Fgsm as i32,
            4.0,
            0,
            -1,
            out.as_mut_ptr(),
            LEN - 3,
        )
    };
    assert_eq!(s, ViapStatus::Shape);

    let s = unsafe {
        viap_attack_image(
            m,
            x.as_ptr(),
            LEN,
            0,
            ViapFamily::Fgsm as i32,
            4.0,
            0,
            -1,
            out.as_mut_ptr(),
            LEN,
        )
    };
    assert_eq!(s, ViapStatus::Ok);
    assert!(viap_last_error().is_null(), "success clears the last error");
    unsafe { viap_model_free(m) };
}

#[test]
fn status_names() {
    let name = |s: i32| {
        unsafe { CStr::from_ptr(viap_status_name(s)) }
            .to_str()
            .unwrap()
            .to_owned()
    };
    assert_eq!(name(ViapStatus::Ok as i32), "ok");
    assert_eq!(name(ViapStatus::BufferSize as i32), "buffer_size");
    assert_eq!(name(-5), "unknown");
}

#[test]
fn header_declares_every_export() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/viap.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "viap_last_error",
        "viap_status_name",
        "viap_model_load",
        "viap_model_free",
        "viap_model_info",
        "viap_predict",
        "viap_input_gradient",
        "viap_attack_image",
        "viap_craft",
        "viap_perturbation_load",
        "viap_perturbation_save",
        "viap_perturbation_free",
        "viap_perturbation_len",
        "viap_perturbation_delta",
        "viap_perturbation_apply",
        "VIAP_STATUS_BUFFER_SIZE",
        "VIAP_FAMILY_VIAP_TARGETED",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }

    // Compile a small client against the header when a C compiler is around.
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("client.c");
    std::fs::write(
        &src,
        "#include \"viap.h\"\n\
         int main(void) {\n\
           ViapModel *m = NULL;\n\
           ViapStatus s = viap_model_load(\"params.bin\", &m);\n\
           double x[3] = {0}, out[3];\n\
           s = viap_attack_image(m, x, 3, 0, VIAP_FAMILY_BIM, 4.0, 0, -1, out, 3);\n\
           viap_model_free(m);\n\
           return s == VIAP_STATUS_OK ? 0 : 1;\n\
         }\n",
    )
    .unwrap();
    let include = header.parent().unwrap();
    match Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(include)
        .arg(&src)
        .output()
    {
        Ok(o) => assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr)),
        Err(_) => eprintln!("no C compiler found; header syntax check skipped"),
    }
}
