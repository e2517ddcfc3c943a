use std::ffi::CStr;
use std::ptr;

use burst_ffi::*;

fn config(seq_len: usize, head_dim: usize, heads: usize, devices: usize) -> BurstConfig {
    BurstConfig {
        seq_len,
        head_dim,
        heads,
        devices,
        tile: 2,
        causal: false,
        pad: false,
        threaded: false,
        overlap: BurstOverlap::None,
    }
}

// Small deterministic inputs; the values only need to be irregular.
fn data(len: usize, salt: f64) -> Vec<f64> {
    (0..len).map(|i| ((i as f64 + 1.0) * (0.37 + salt)).sin()).collect()
}

fn last_error() -> String {
    let p = burst_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

struct Engine(*mut BurstEngine);

impl Drop for Engine {
    fn drop(&mut self) {
        unsafe { burst_engine_free(self.0) }
    }
}

fn engine(cfg: &BurstConfig, q: &[f64], k: &[f64], v: &[f64]) -> Result<Engine, BurstStatus> {
    let mut e = ptr::null_mut();
    let s = unsafe { burst_engine_new(cfg, q.as_ptr(), k.as_ptr(), v.as_ptr(), q.len(), &mut e) };
    if s == BurstStatus::Ok {
        Ok(Engine(e))
    } else {
        assert!(e.is_null());
        Err(s)
    }
}

#[test]
fn forward_matches_dense_and_counts_traffic() {
    for causal in [false, true] {
        let cfg = BurstConfig {
            causal,
            ..config(8, 4, 2, 4)
        };
        let n = 2 * 8 * 4;
        let (q, k, v) = (data(n, 0.0), data(n, 0.1), data(n, 0.2));
        let e = engine(&cfg, &q, &k, &v).unwrap();
        let (mut o, mut lse) = (vec![0.0; n], vec![0.0; 16]);
        let s = unsafe { burst_engine_forward(e.0, o.as_mut_ptr(), n, lse.as_mut_ptr(), 16) };
        assert_eq!(s, BurstStatus::Ok);
        let (mut o_ref, mut lse_ref) = (vec![0.0; n], vec![0.0; 16]);
        let s = unsafe {
            burst_dense_forward(&cfg, q.as_ptr(), k.as_ptr(), v.as_ptr(), n, o_ref.as_mut_ptr(), lse_ref.as_mut_ptr(), 16)
        };
        assert_eq!(s, BurstStatus::Ok);
        for (a, b) in o.iter().zip(&o_ref).chain(lse.iter().zip(&lse_ref)) {
            assert!((a - b).abs() < 1e-12);
        }

        let d_o = data(n, 0.3);
        let (mut dq, mut dk, mut dv) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let s = unsafe { burst_engine_backward(e.0, d_o.as_ptr(), dq.as_mut_ptr(), dk.as_mut_ptr(), dv.as_mut_ptr(), n) };
        assert_eq!(s, BurstStatus::Ok);
        assert!(dq.iter().chain(&dk).chain(&dv).any(|&x| x != 0.0));

        let mut c = BurstCommCounts::default();
        assert_eq!(unsafe { burst_engine_comm(e.0, &mut c) }, BurstStatus::Ok);
        // B·Z = 2, N = 8, d = 4
        assert_eq!(c.elements_sent_forward, 2 * 2 * 8 * 4);
        assert_eq!(c.elements_sent_backward, 3 * 2 * 8 * 4 + 2 * 2 * 8);
        assert_eq!(c.ring_steps, 8);
    }
}

#[test]
fn overlap_and_threads_do_not_change_results() {
    let n = 12 * 3;
    let (q, k, v) = (data(n, 0.5), data(n, 0.6), data(n, 0.7));
    let run = |threaded, overlap| {
        let cfg = BurstConfig {
            threaded,
            overlap,
            ..config(12, 3, 1, 3)
        };
        let e = engine(&cfg, &q, &k, &v).unwrap();
        let (mut o, mut lse) = (vec![0.0; n], vec![0.0; 12]);
        assert_eq!(unsafe { burst_engine_forward(e.0, o.as_mut_ptr(), n, lse.as_mut_ptr(), 12) }, BurstStatus::Ok);
        o
    };
    let base = run(false, BurstOverlap::None);
    assert_eq!(run(true, BurstOverlap::DoubleBuffer), base);
}

#[test]
fn errors_set_status_and_message() {
    let n = 6 * 2;
    let (q, k, v) = (data(n, 0.0), data(n, 0.1), data(n, 0.2));
    assert_eq!(engine(&config(6, 2, 1, 4), &q, &k, &v).err(), Some(BurstStatus::Partition));
    assert!(last_error().contains("devices"));
    assert!(engine(&BurstConfig { pad: true, ..config(6, 2, 1, 4) }, &q, &k, &v).is_ok());

    let mut e = ptr::null_mut();
    let s = unsafe { burst_engine_new(&config(6, 2, 1, 2), q.as_ptr(), k.as_ptr(), v.as_ptr(), n - 1, &mut e) };
    assert_eq!(s, BurstStatus::InvalidArgument);
    assert!(last_error().contains("expected 12"));

    let s = unsafe { burst_engine_new(ptr::null(), q.as_ptr(), k.as_ptr(), v.as_ptr(), n, &mut e) };
    assert_eq!(s, BurstStatus::NullPointer);
    assert_eq!(engine(&config(0, 2, 1, 1), &[], &[], &[]).err(), Some(BurstStatus::InvalidArgument));

    let e = engine(&config(6, 2, 1, 2), &q, &k, &v).unwrap();
    let mut g = vec![0.0; n];
    let s = unsafe { burst_engine_backward(e.0, q.as_ptr(), g.as_mut_ptr(), g.clone().as_mut_ptr(), g.clone().as_mut_ptr(), n) };
    assert_eq!(s, BurstStatus::ForwardNotRun);
    let mut o = vec![0.0; n];
    let mut lse = vec![0.0; 5];
    let s = unsafe { burst_engine_forward(e.0, o.as_mut_ptr(), n, lse.as_mut_ptr(), 5) };
    assert_eq!(s, BurstStatus::InvalidArgument);
    assert!(last_error().contains("lse"));
    unsafe { burst_engine_free(ptr::null_mut()) };
}

#[test]
fn cost_entry_points() {
    let spec = BurstModelSpec {
        batch: 1,
        seq_len: 16,
        heads: 2,
        head_dim: 4,
        hidden: 0,
        heads_per_device: 2.0,
        ffn_dim: 32,
        bits_per_element: 32,
        sram_bytes: 192 * 1024,
    };
    let (mut f, mut b) = (0, 0);
    let s = unsafe { burst_cost_communication(&spec, 4, BurstMethod::BurstAttention, &mut f, &mut b) };
    assert_eq!(s, BurstStatus::Ok);
    assert_eq!((f, b), (2 * 2 * 16 * 4, 3 * 2 * 16 * 4 + 2 * 2 * 16));
    let s = unsafe { burst_cost_communication(&spec, 4, BurstMethod::RingAttention, &mut f, &mut b) };
    assert_eq!(s, BurstStatus::Ok);
    assert_eq!(b, 6 * 2 * 16 * 4);

    let mut t = 0.0;
    // 4 · t_comm with t_comm = 48, plus compute split over 4 devices
    let s = unsafe { burst_cost_runtime(&spec, 4, 64.0, BurstMethod::TensorParallel, 4.0, 6.0, 20.0, &mut t) };
    assert_eq!(s, BurstStatus::Ok);
    assert_eq!(t, 4.0 * 48.0 + 2.5 + 5.0);
    let s = unsafe { burst_cost_runtime(&spec, 4, 64.0, BurstMethod::RingAttention, 0.0, 0.0, 0.0, &mut t) };
    assert_eq!(s, BurstStatus::InvalidArgument);
    let s = unsafe { burst_cost_communication(&spec, 0, BurstMethod::BurstAttention, &mut f, &mut b) };
    assert_eq!(s, BurstStatus::InvalidArgument);
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(burst_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/burst_ffi.h")).unwrap();
    for name in [
        "BURST_FFI_H",
        "typedef struct BurstEngine BurstEngine;",
        "BURST_STATUS_PARTITION",
        "burst_engine_new",
        "burst_engine_forward",
        "burst_engine_backward",
        "burst_engine_comm",
        "burst_engine_free",
        "burst_dense_forward",
        "burst_cost_communication",
        "burst_cost_runtime",
        "burst_last_error_message",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile_dir();
    let src = dir.join("use_header.c");
    std::fs::write(
        &src,
        "#include \"burst_ffi.h\"\nint main(void) { BurstConfig c = {0}; (void)c; return burst_version() == 0; }\n",
    )
    .unwrap();
    let status = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok())
        .ok_or(())
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("burst-ffi-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
