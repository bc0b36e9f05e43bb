//! C interface to trained side networks.
//!
//! Every function returns an [`SsnaStatus`]. On failure a message is kept
//! per thread and can be read with [`ssna_last_error`]. Handles are opaque
//! and must be released with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ssna::data::{load_embeddings, truncate_recent, EmbeddingStore};
use ssna::encoder::MAX_SEQ_LEN;
use ssna::eval::{rank_by_scores, Catalog};
use ssna::model::SideNetwork;
use ssna::trainer::{model_from_checkpoint, Checkpoint};
use ssna::ErrorKind;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SsnaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NotFound = 3,
    Io = 4,
    Config = 5,
    Data = 6,
    Numeric = 7,
    Panic = 8,
}

/// Embedding file loaded in memory.
pub struct SsnaStore {
    inner: EmbeddingStore,
}

/// Trained network with its adapted catalog. Independent of the store it
/// was opened with.
pub struct SsnaModel {
    model: SideNetwork,
    catalog: Catalog,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Fail(SsnaStatus, String);

impl From<ssna::Error> for Fail {
    fn from(e: ssna::Error) -> Self {
        let status = match e.kind() {
            ErrorKind::Io => SsnaStatus::Io,
            ErrorKind::Config => SsnaStatus::Config,
            ErrorKind::Data => SsnaStatus::Data,
            ErrorKind::Numeric => SsnaStatus::Numeric,
        };
        Fail(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(SsnaStatus::InvalidArgument, msg.into())
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SsnaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SsnaStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SsnaStatus::Panic
        }
    }
}

unsafe fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref()
        .ok_or_else(|| Fail(SsnaStatus::NullPointer, format!("{what} is NULL")))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut()
        .ok_or_else(|| Fail(SsnaStatus::NullPointer, format!("{what} is NULL")))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    let s = non_null(p, what)?;
    let s = CStr::from_ptr(s)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ssna_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or an empty string.
/// Valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn ssna_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Opens an SSNAEMB1 embedding file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `store` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ssna_store_open(path: *const c_char, store: *mut *mut SsnaStore) -> SsnaStatus {
    guard(|| {
        let slot = out(store, "store")?;
        *slot = ptr::null_mut();
        let inner = load_embeddings(&path_arg(path, "path")?)?;
        *slot = Box::into_raw(Box::new(SsnaStore { inner }));
        Ok(())
    })
}

/// # Safety
/// `store` must come from [`ssna_store_open`] and not be used afterwards.
/// NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn ssna_store_free(store: *mut SsnaStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Item count, stored layer count and embedding width.
///
/// # Safety
/// `store` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ssna_store_dims(
    store: *const SsnaStore,
    items: *mut usize,
    layers: *mut usize,
    d_llm: *mut usize,
) -> SsnaStatus {
    guard(|| {
        let s = &non_null(store, "store")?.inner;
        *out(items, "items")? = s.len();
        *out(layers, "layers")? = s.layers();
        *out(d_llm, "d_llm")? = s.d_llm();
        Ok(())
    })
}

/// Row of an item id. Returns `SSNA_STATUS_NOT_FOUND` for unknown ids.
///
/// # Safety
/// `store` must be a live handle, `id` NUL-terminated, `row` writable.
#[no_mangle]
pub unsafe extern "C" fn ssna_store_row(store: *const SsnaStore, id: *const c_char, row: *mut usize) -> SsnaStatus {
    guard(|| {
        let s = &non_null(store, "store")?.inner;
        let id = CStr::from_ptr(non_null(id, "id")?)
            .to_str()
            .map_err(|_| invalid("id is not UTF-8"))?;
        let r = s
            .row_of(id)
            .ok_or_else(|| Fail(SsnaStatus::NotFound, format!("unknown item {id:?}")))?;
        *out(row, "row")? = r;
        Ok(())
    })
}

/// Copies the stored vector of `row` at `layer` (0 = top) into `buf`,
/// which must hold exactly `d_llm` floats.
///
/// # Safety
/// `store` must be a live handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn ssna_store_vector(
    store: *const SsnaStore,
    row: usize,
    layer: usize,
    buf: *mut f32,
    len: usize,
) -> SsnaStatus {
    guard(|| {
        let s = &non_null(store, "store")?.inner;
        if row >= s.len() || layer >= s.layers() {
            return Err(invalid(format!(
                "row {row} layer {layer} outside {} x {}",
                s.len(),
                s.layers()
            )));
        }
        if len != s.d_llm() {
            return Err(invalid(format!("buffer holds {len} values, d_llm is {}", s.d_llm())));
        }
        out(buf, "buf")?;
        std::slice::from_raw_parts_mut(buf, len).copy_from_slice(s.vector(row, layer));
        Ok(())
    })
}

/// Loads a checkpoint and adapts every item of `store`. The store may be
/// freed afterwards.
///
/// # Safety
/// `path` must be NUL-terminated, `store` a live handle, `model` writable.
#[no_mangle]
pub unsafe extern "C" fn ssna_model_open(
    path: *const c_char,
    store: *const SsnaStore,
    model: *mut *mut SsnaModel,
) -> SsnaStatus {
    guard(|| {
        let slot = out(model, "model")?;
        *slot = ptr::null_mut();
        let s = &non_null(store, "store")?.inner;
        let ckpt = Checkpoint::load(&path_arg(path, "path")?)?;
        let net = model_from_checkpoint(&ckpt)?;
        net.config.check_store(s)?;
        let catalog = Catalog::new(net.catalog(s)?)?;
        *slot = Box::into_raw(Box::new(SsnaModel { model: net, catalog }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`ssna_model_open`] and not be used afterwards.
/// NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn ssna_model_free(model: *mut SsnaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Catalog size and adapted embedding width.
///
/// # Safety
/// `model` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ssna_model_dims(model: *const SsnaModel, items: *mut usize, dim: *mut usize) -> SsnaStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        *out(items, "items")? = m.catalog.len();
        *out(dim, "dim")? = m.catalog.embeddings().cols();
        Ok(())
    })
}

/// Copies the adapted embedding of `row` into `buf` of exactly `dim` values.
///
/// # Safety
/// `model` must be a live handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn ssna_model_item_embedding(
    model: *const SsnaModel,
    row: usize,
    buf: *mut f64,
    len: usize,
) -> SsnaStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let e = m.catalog.embeddings();
        if row >= e.rows() {
            return Err(invalid(format!("row {row} outside {} items", e.rows())));
        }
        if len != e.cols() {
            return Err(invalid(format!("buffer holds {len} values, dim is {}", e.cols())));
        }
        out(buf, "buf")?;
        std::slice::from_raw_parts_mut(buf, len).copy_from_slice(e.row(row));
        Ok(())
    })
}

/// Top-`k` items for a chronological history of item rows.
///
/// Only the most recent items within the encoder's window are used. With
/// `exclude_history` the history items are never returned. Writes up to `k`
/// rows (and cosine scores, when `scores` is not NULL) and stores the
/// number written in `written`.
///
/// # Safety
/// `model` must be a live handle, `history` valid for `history_len` reads,
/// `rows` (and `scores` unless NULL) valid for `k` writes, `written` writable.
#[no_mangle]
pub unsafe extern "C" fn ssna_model_recommend(
    model: *const SsnaModel,
    history: *const usize,
    history_len: usize,
    k: usize,
    exclude_history: bool,
    rows: *mut usize,
    scores: *mut f64,
    written: *mut usize,
) -> SsnaStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let written = out(written, "written")?;
        *written = 0;
        if history_len == 0 {
            return Err(invalid("history is empty"));
        }
        non_null(history, "history")?;
        out(rows, "rows")?;
        let h = std::slice::from_raw_parts(history, history_len);
        if let Some(&bad) = h.iter().find(|&&r| r >= m.catalog.len()) {
            return Err(invalid(format!("history row {bad} outside {} items", m.catalog.len())));
        }
        let input = truncate_recent(h, MAX_SEQ_LEN);
        let u = m.model.intent(m.catalog.embeddings(), &input)?;
        let s = m.catalog.scores(&u)?;
        let top: Vec<usize> = rank_by_scores(&s)
            .into_iter()
            .filter(|r| !(exclude_history && h.contains(r)))
            .take(k)
            .collect();
        std::slice::from_raw_parts_mut(rows, top.len()).copy_from_slice(&top);
        if !scores.is_null() {
            let dst = std::slice::from_raw_parts_mut(scores, top.len());
            for (d, &r) in dst.iter_mut().zip(&top) {
                *d = s[r];
            }
        }
        *written = top.len();
        Ok(())
    })
}
