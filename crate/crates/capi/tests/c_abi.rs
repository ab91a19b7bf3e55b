use std::ffi::{c_char, CString};
use std::ptr;

use ep_capi::*;
use ep_core::{EpConfig, ErrorCode};

const F32: i32 = 0;
const I64: i32 = 5;
const TOKENS: i32 = 0;
const TOPK_IDX: i32 = 1;
const TOPK_WEIGHTS: i32 = 2;

struct Tensor(*mut EpTensor);

impl Tensor {
    fn new(shape: &[usize], dtype: i32, tag: i32, data: Option<Vec<u8>>) -> Self {
        let mut out = ptr::null_mut();
        let (p, n) = data.as_ref().map_or((ptr::null(), 0), |d| (d.as_ptr(), d.len()));
        let rc = unsafe { ep_tensor_create(shape.as_ptr(), shape.len(), dtype, tag, p, n, &mut out) };
        assert_eq!(rc, EP_OK, "{}", last_error());
        Self(out)
    }

    fn f32(shape: &[usize], tag: i32, v: &[f32]) -> Self {
        Self::new(shape, F32, tag, Some(v.iter().flat_map(|x| x.to_le_bytes()).collect()))
    }

    fn read_f32(&self, n: usize) -> Vec<f32> {
        let mut buf = vec![0u8; n * 4];
        assert_eq!(unsafe { ep_tensor_read(self.0, buf.as_mut_ptr(), buf.len()) }, EP_OK);
        buf.chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        unsafe { ep_tensor_destroy(self.0) }
    }
}

fn list(ts: &[*const EpTensor]) -> EpTensorList {
    EpTensorList { tensors: ts.as_ptr(), len: ts.len() }
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { ep_last_error(buf.as_mut_ptr(), buf.len()) };
    let s: Vec<u8> = buf.iter().take_while(|&&c| c != 0).map(|&c| c as u8).collect();
    assert_eq!(s.len(), n.min(255));
    String::from_utf8(s).unwrap()
}

fn create(cfg: &EpConfig) -> Result<*mut EpWorld, i32> {
    let json = CString::new(serde_json::to_string(cfg).unwrap()).unwrap();
    let mut w = ptr::null_mut();
    match unsafe { ep_create_group(json.as_ptr(), &mut w) } {
        EP_OK => Ok(w),
        rc => Err(rc),
    }
}

fn cfg() -> EpConfig {
    EpConfig { num_ranks: 2, ranks_per_node: 2, num_experts: 4, top_k: 2, hidden: 4, max_tokens_per_rank: 3, ..Default::default() }
}

#[test]
fn round_trip_through_the_c_surface() {
    let cfg = cfg();
    let w = create(&cfg).unwrap();
    let mut n = 0;
    assert_eq!(unsafe { ep_group_num_ranks(w, &mut n) }, EP_OK);
    assert_eq!(n, 2);

    let ids: Vec<u8> = [0i64, 3, 1, 2, 2, 0].iter().flat_map(|x| x.to_le_bytes()).collect();
    let topk: Vec<Tensor> = (0..2).map(|_| Tensor::new(&[3, 2], I64, TOPK_IDX, Some(ids.clone()))).collect();
    let topk_ptrs: Vec<*const EpTensor> = topk.iter().map(|t| t.0 as *const _).collect();
    let mut h = 0u64;
    assert_eq!(unsafe { ep_create_handle(w, topk_ptrs.as_ptr(), 2, &mut h) }, EP_OK, "{}", last_error());

    let x: Vec<Vec<f32>> = (0..2).map(|r| (0..12).map(|i| (r * 100 + i) as f32).collect()).collect();
    let inputs: Vec<Tensor> = x.iter().map(|v| Tensor::f32(&[3, 4], TOKENS, v)).collect();
    let recv: Vec<Tensor> = (0..2).map(|_| Tensor::new(&[2, cfg.ll_expert_capacity(), 4], F32, TOKENS, None)).collect();
    let ptrs = |ts: &[Tensor], r: usize| vec![ts[r].0 as *const EpTensor];
    let (ins, recv_ptrs): (Vec<_>, Vec<_>) = (0..2).map(|r| (ptrs(&inputs, r), ptrs(&recv, r))).unzip();
    let d: Vec<EpRankTensors> =
        (0..2).map(|r| EpRankTensors { inputs: list(&ins[r]), outputs: list(&recv_ptrs[r]), local: list(&[]) }).collect();
    assert_eq!(unsafe { ep_dispatch(w, h, d.as_ptr(), 2, true) }, EP_OK, "{}", last_error());
    assert_eq!(unsafe { ep_complete(w, h) }, EP_OK);
    let mut counts = [0usize; 2];
    assert_eq!(unsafe { ep_get_num_recv_tokens(w, h, counts.as_mut_ptr(), 2) }, EP_OK);
    assert_eq!(counts, [6, 6]);

    let weights: Vec<Tensor> = (0..2).map(|_| Tensor::f32(&[3, 2], TOPK_WEIGHTS, &[0.5; 6])).collect();
    let combined: Vec<Tensor> = (0..2).map(|_| Tensor::new(&[3, 4], F32, TOKENS, None)).collect();
    let (outs, locals): (Vec<_>, Vec<_>) = (0..2).map(|r| (ptrs(&combined, r), ptrs(&weights, r))).unzip();
    let c: Vec<EpRankTensors> = (0..2)
        .map(|r| EpRankTensors { inputs: list(&recv_ptrs[r]), outputs: list(&outs[r]), local: list(&locals[r]) })
        .collect();
    assert_eq!(unsafe { ep_combine(w, h, c.as_ptr(), 2, false) }, EP_OK, "{}", last_error());
    for r in 0..2 {
        assert_eq!(combined[r].read_f32(12), x[r]);
    }

    assert_eq!(unsafe { ep_handle_destroy(w, h) }, EP_OK);
    assert_eq!(unsafe { ep_group_destroy(w) }, EP_OK);
}

#[test]
fn error_codes_cross_the_boundary() {
    assert_eq!(ErrorCode::InvalidArgument.as_i32(), 1);
    assert_eq!(ErrorCode::TransportClosed.as_i32(), 7);
    assert_eq!(create(&EpConfig { top_k: 9, ..cfg() }), Err(ErrorCode::InvalidArgument.as_i32()));
    assert!(last_error().contains("InvalidArgument"));

    let bad = CString::new("{not json").unwrap();
    let mut w = ptr::null_mut();
    assert_eq!(unsafe { ep_create_group(bad.as_ptr(), &mut w) }, 1);
    assert!(w.is_null());

    let w = create(&cfg()).unwrap();
    assert_eq!(unsafe { ep_complete(w, 99) }, ErrorCode::InvalidArgument.as_i32());

    let tokens: Vec<Tensor> = (0..2).map(|_| Tensor::f32(&[1, 2], TOKENS, &[0.0, 1.0])).collect();
    let ptrs: Vec<*const EpTensor> = tokens.iter().map(|t| t.0 as *const _).collect();
    let mut h = 0;
    assert_eq!(unsafe { ep_create_handle(w, ptrs.as_ptr(), 2, &mut h) }, ErrorCode::TagMismatch.as_i32());
    assert_eq!(unsafe { ep_create_handle(w, ptrs.as_ptr(), 1, &mut h) }, ErrorCode::InvalidArgument.as_i32());

    let ids: Vec<u8> = [0i64, 1].iter().flat_map(|x| x.to_le_bytes()).collect();
    let topk: Vec<Tensor> = (0..2).map(|_| Tensor::new(&[1, 2], I64, TOPK_IDX, Some(ids.clone()))).collect();
    let ptrs: Vec<*const EpTensor> = topk.iter().map(|t| t.0 as *const _).collect();
    assert_eq!(unsafe { ep_create_handle(w, ptrs.as_ptr(), 2, &mut h) }, EP_OK);
    let mut counts = [0usize; 2];
    assert_eq!(unsafe { ep_get_num_recv_tokens(w, h, counts.as_mut_ptr(), 2) }, ErrorCode::HandleStateError.as_i32());
    assert_eq!(unsafe { ep_dispatch(w, h, ptr::null(), 2, false) }, ErrorCode::InvalidArgument.as_i32());

    let mut t = ptr::null_mut();
    let shape = [2usize, 2];
    assert_eq!(unsafe { ep_tensor_create(shape.as_ptr(), 2, 42, TOKENS, ptr::null(), 0, &mut t) }, 1);
    assert_eq!(unsafe { ep_tensor_create(shape.as_ptr(), 2, F32, TOKENS, [0u8; 3].as_ptr(), 3, &mut t) }, 2);
    assert_eq!(unsafe { ep_group_destroy(w) }, EP_OK);
}

#[test]
fn header_matches_the_exports() {
    let header = include_str!("../include/ep.h");
    for f in [
        "ep_last_error",
        "ep_create_group",
        "ep_group_destroy",
        "ep_group_num_ranks",
        "ep_tensor_create",
        "ep_tensor_destroy",
        "ep_tensor_read",
        "ep_create_handle",
        "ep_dispatch",
        "ep_combine",
        "ep_complete",
        "ep_get_num_recv_tokens",
        "ep_handle_destroy",
    ] {
        assert!(header.contains(&format!(" {f}(")), "{f} missing from ep.h");
    }
    for (name, code) in [
        ("EP_INVALID_ARGUMENT", ErrorCode::InvalidArgument),
        ("EP_SHAPE_MISMATCH", ErrorCode::ShapeMismatch),
        ("EP_TAG_MISMATCH", ErrorCode::TagMismatch),
        ("EP_CONFIG_MISMATCH", ErrorCode::ConfigMismatch),
        ("EP_CAPACITY_EXCEEDED", ErrorCode::CapacityExceeded),
        ("EP_HANDLE_STATE_ERROR", ErrorCode::HandleStateError),
        ("EP_TRANSPORT_CLOSED", ErrorCode::TransportClosed),
    ] {
        assert!(header.contains(&format!("{name} = {},", code.as_i32())), "{name}");
    }
}

#[test]
fn c_program_links_against_the_cdylib() {
    let deps = std::env::current_exe().unwrap().parent().unwrap().to_path_buf();
    let lib = deps.join("libep_capi.so");
    assert!(lib.exists(), "{} not built", lib.display());
    let dir = env!("CARGO_MANIFEST_DIR");
    let exe = deps.join(format!("ep_capi_smoke_{}", std::process::id()));
    let status = std::process::Command::new("cc")
        .args(["-std=c11", "-Wall", "-Werror", "-I", &format!("{dir}/include"), &format!("{dir}/tests/smoke.c"), "-o"])
        .arg(&exe)
        .arg(format!("-L{}", deps.display()))
        .arg(format!("-Wl,-rpath,{}", deps.display()))
        .arg("-lep_capi")
        .status()
        .expect("run cc");
    assert!(status.success());
    let out = std::process::Command::new(&exe).output().unwrap();
    let _ = std::fs::remove_file(&exe);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}
