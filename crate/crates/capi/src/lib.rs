//! C ABI mirror of the group/handle API, driven at job level: every call
//! runs on all simulated ranks. Functions return 0 on success, an
//! [`ErrorCode::as_i32`] value on failure, and [`EP_INTERNAL`] if the
//! library panicked. [`ep_last_error`] copies the detail message of the
//! most recent failure on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ep_core::fabric::FabricOptions;
use ep_core::world::{RankTensors, World};
use ep_core::{Dtype, EpConfig, EpError, NDTensor, TensorBuffer, TensorTag};

pub const EP_OK: i32 = 0;
pub const EP_INTERNAL: i32 = -1;

/// Opaque group spanning every simulated rank.
pub struct EpWorld(World);

/// Opaque tensor descriptor. Clones made by the library share storage.
pub struct EpTensor(NDTensor);

#[repr(C)]
#[derive(Clone, Copy)]
pub struct EpTensorList {
    pub tensors: *const *const EpTensor,
    pub len: usize,
}

#[repr(C)]
#[derive(Clone, Copy)]
pub struct EpRankTensors {
    pub inputs: EpTensorList,
    pub outputs: EpTensorList,
    pub local: EpTensorList,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(e: EpError) -> i32 {
    LAST_ERROR.with(|m| *m.borrow_mut() = e.to_string());
    e.code.as_i32()
}

fn guard(f: impl FnOnce() -> Result<(), EpError>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EP_OK,
        Ok(Err(e)) => fail(e),
        Err(_) => {
            LAST_ERROR.with(|m| *m.borrow_mut() = "internal panic".into());
            EP_INTERNAL
        }
    }
}

fn null(what: &str) -> EpError {
    EpError::invalid(format!("{what} is null"))
}

unsafe fn world<'a>(w: *mut EpWorld) -> Result<&'a mut World, EpError> {
    w.as_mut().map(|w| &mut w.0).ok_or_else(|| null("group"))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], EpError> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn tensors(list: EpTensorList, what: &str) -> Result<Vec<NDTensor>, EpError> {
    slice(list.tensors, list.len, what)?
        .iter()
        .map(|t| t.as_ref().map(|t| t.0.clone()).ok_or_else(|| null(what)))
        .collect()
}

unsafe fn rank_tensors(p: *const EpRankTensors, n: usize, ranks: usize) -> Result<Vec<RankTensors>, EpError> {
    if n != ranks {
        return Err(EpError::invalid(format!("expected tensor lists for {ranks} ranks, got {n}")));
    }
    slice(p, n, "rank tensor array")?
        .iter()
        .map(|r| {
            Ok(RankTensors {
                inputs: tensors(r.inputs, "input tensor")?,
                outputs: tensors(r.outputs, "output tensor")?,
                local: tensors(r.local, "local tensor")?,
            })
        })
        .collect()
}

/// 0 F32, 1 BF16, 2 F16, 3 FP8, 4 I32, 5 I64.
pub fn dtype_from_i32(v: i32) -> Option<Dtype> {
    Dtype::ALL.get(usize::try_from(v).ok()?).copied()
}

/// 0 TOKENS, 1 TOPK_IDX, 2 TOPK_WEIGHTS, 3 SCALES, 4 RECV_EXPERT_COUNTER_DEVICE,
/// 5 RECV_EXPERT_COUNTER_HOST, 6 NONE, 7 TOKENS_PER_EXPERTS.
pub fn tag_from_i32(v: i32) -> Option<TensorTag> {
    TensorTag::ALL.get(usize::try_from(v).ok()?).copied()
}

/// Copies the last error message, NUL terminated and truncated to `cap`
/// bytes. Returns the full message length.
///
/// # Safety
/// `buf` must be null or valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn ep_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|m| {
        let m = m.borrow();
        if !buf.is_null() && cap > 0 {
            let n = m.len().min(cap - 1);
            ptr::copy_nonoverlapping(m.as_ptr(), buf.cast(), n);
            *buf.add(n) = 0;
        }
        m.len()
    })
}

/// Creates the group on every rank from a JSON config.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ep_create_group(config_json: *const c_char, out: *mut *mut EpWorld) -> i32 {
    guard(|| {
        if config_json.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let text = CStr::from_ptr(config_json).to_str().map_err(|e| EpError::invalid(e.to_string()))?;
        let cfg: EpConfig = serde_json::from_str(text).map_err(|e| EpError::invalid(format!("config: {e}")))?;
        let w = World::create(&cfg, FabricOptions::default())?;
        *out = Box::into_raw(Box::new(EpWorld(w)));
        Ok(())
    })
}

/// Destroys the group and frees it. On failure the group stays valid.
///
/// # Safety
/// `w` must come from [`ep_create_group`] and not have been destroyed.
#[no_mangle]
pub unsafe extern "C" fn ep_group_destroy(w: *mut EpWorld) -> i32 {
    guard(|| {
        world(w)?.destroy()?;
        drop(Box::from_raw(w));
        Ok(())
    })
}

/// Number of ranks in the group.
///
/// # Safety
/// `w` must be a live group and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ep_group_num_ranks(w: *mut EpWorld, out: *mut usize) -> i32 {
    guard(|| {
        let n = world(w)?.num_ranks();
        *out.as_mut().ok_or_else(|| null("out"))? = n;
        Ok(())
    })
}

/// Creates a row-major tensor. A null `data` gives zeroed storage;
/// otherwise `data_len` must equal the tensor's byte size.
///
/// # Safety
/// `shape` must be valid for `ndim` entries, `data` for `data_len` bytes,
/// and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ep_tensor_create(
    shape: *const usize,
    ndim: usize,
    dtype: i32,
    tag: i32,
    data: *const u8,
    data_len: usize,
    out: *mut *mut EpTensor,
) -> i32 {
    guard(|| {
        let shape = slice(shape, ndim, "shape")?;
        let dtype = dtype_from_i32(dtype).ok_or_else(|| EpError::invalid(format!("unknown dtype {dtype}")))?;
        let tag = tag_from_i32(tag).ok_or_else(|| EpError::invalid(format!("unknown tag {tag}")))?;
        let bytes = shape.iter().product::<usize>() * dtype.byte_width();
        let buffer = if data.is_null() {
            TensorBuffer::zeroed(bytes)
        } else {
            if data_len != bytes {
                return Err(EpError::shape(format!("data has {data_len} bytes, tensor needs {bytes}")));
            }
            TensorBuffer::from_vec(slice(data, data_len, "data")?.to_vec())
        };
        let t = NDTensor::create(shape, dtype, tag, buffer)?;
        *out.as_mut().ok_or_else(|| null("out"))? = Box::into_raw(Box::new(EpTensor(t)));
        Ok(())
    })
}

/// # Safety
/// `t` must come from [`ep_tensor_create`] or be null.
#[no_mangle]
pub unsafe extern "C" fn ep_tensor_destroy(t: *mut EpTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Copies the tensor's elements in row-major order.
///
/// # Safety
/// `t` must be a live tensor and `buf` valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn ep_tensor_read(t: *const EpTensor, buf: *mut u8, cap: usize) -> i32 {
    guard(|| {
        let t = t.as_ref().ok_or_else(|| null("tensor"))?;
        let bytes = t.0.to_bytes();
        if cap != bytes.len() {
            return Err(EpError::shape(format!("buffer has {cap} bytes, tensor holds {}", bytes.len())));
        }
        if buf.is_null() {
            return Err(null("buffer"));
        }
        ptr::copy_nonoverlapping(bytes.as_ptr(), buf, cap);
        Ok(())
    })
}

/// Creates a handle from one TOPK_IDX tensor per rank.
///
/// # Safety
/// `w` must be a live group, `topk` valid for `n` tensors, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ep_create_handle(w: *mut EpWorld, topk: *const *const EpTensor, n: usize, out: *mut u64) -> i32 {
    guard(|| {
        let w = world(w)?;
        let list = tensors(EpTensorList { tensors: topk, len: n }, "topk tensor")?;
        if list.len() != w.num_ranks() {
            return Err(EpError::invalid(format!("expected {} topk tensors, got {}", w.num_ranks(), list.len())));
        }
        let h = w.create_handle(&list)?;
        *out.as_mut().ok_or_else(|| null("out"))? = h;
        Ok(())
    })
}

/// # Safety
/// `w` must be a live group and `per_rank` valid for `n` entries.
#[no_mangle]
pub unsafe extern "C" fn ep_dispatch(
    w: *mut EpWorld,
    handle: u64,
    per_rank: *const EpRankTensors,
    n: usize,
    send_only: bool,
) -> i32 {
    guard(|| {
        let w = world(w)?;
        let t = rank_tensors(per_rank, n, w.num_ranks())?;
        w.dispatch(handle, &t, send_only)
    })
}

/// # Safety
/// `w` must be a live group and `per_rank` valid for `n` entries.
#[no_mangle]
pub unsafe extern "C" fn ep_combine(
    w: *mut EpWorld,
    handle: u64,
    per_rank: *const EpRankTensors,
    n: usize,
    send_only: bool,
) -> i32 {
    guard(|| {
        let w = world(w)?;
        let t = rank_tensors(per_rank, n, w.num_ranks())?;
        w.combine(handle, &t, send_only)
    })
}

/// # Safety
/// `w` must be a live group.
#[no_mangle]
pub unsafe extern "C" fn ep_complete(w: *mut EpWorld, handle: u64) -> i32 {
    guard(|| world(w)?.complete(handle))
}

/// Writes each rank's received token count into `out[0..n]`.
///
/// # Safety
/// `w` must be a live group and `out` valid for `n` writes.
#[no_mangle]
pub unsafe extern "C" fn ep_get_num_recv_tokens(w: *mut EpWorld, handle: u64, out: *mut usize, n: usize) -> i32 {
    guard(|| {
        let w = world(w)?;
        if n != w.num_ranks() || out.is_null() {
            return Err(EpError::invalid(format!("output must hold {} counts", w.num_ranks())));
        }
        let counts = w.num_recv_tokens(handle)?;
        ptr::copy_nonoverlapping(counts.as_ptr(), out, n);
        Ok(())
    })
}

/// # Safety
/// `w` must be a live group.
#[no_mangle]
pub unsafe extern "C" fn ep_handle_destroy(w: *mut EpWorld, handle: u64) -> i32 {
    guard(|| world(w)?.destroy_handle(handle))
}
