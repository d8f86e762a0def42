//! C ABI for the `smae` library.
//!
//! Objects are opaque handles created by `*_new`/`*_load` style functions
//! and released with the matching `*_free`. Every fallible call returns a
//! [`SmaeStatus`]; on failure [`smae_last_error_message`] describes the
//! error for the calling thread.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use smae::geometry::{self, PointCloud, ShapeKind};
use smae::pipeline::checkpoint::Checkpoint;
use smae::{Error, RunConfig};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SmaeStatus {
    Ok = 0,
    InvalidArgument = 1,
    Numeric = 2,
    Config = 3,
    Io = 4,
    Invariant = 5,
    NullPointer = 6,
    Panic = 7,
}

/// A point cloud with optional per-point labels.
pub struct SmaeCloud {
    inner: PointCloud,
}

/// A pretrained model restored from a checkpoint.
pub struct SmaeModel {
    config: RunConfig,
    checkpoint: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SmaeStatus {
    match e {
        Error::InvalidArgument(_) => SmaeStatus::InvalidArgument,
        Error::Numeric { .. } => SmaeStatus::Numeric,
        Error::Config(_) | Error::Parse { .. } => SmaeStatus::Config,
        Error::Io(_) => SmaeStatus::Io,
        Error::Invariant(_) => SmaeStatus::Invariant,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (SmaeStatus, String)>) -> SmaeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SmaeStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SmaeStatus::Panic
        }
    }
}

fn lib(e: Error) -> (SmaeStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (SmaeStatus, String) {
    (SmaeStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (SmaeStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (SmaeStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn cloud_ref<'a>(p: *const SmaeCloud) -> Result<&'a PointCloud, (SmaeStatus, String)> {
    p.as_ref().map(|c| &c.inner).ok_or_else(|| null("cloud"))
}

unsafe fn out_slice<'a, T>(
    p: *mut T,
    len: usize,
    what: &str,
) -> Result<&'a mut [T], (SmaeStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn publish<T>(out: *mut *mut T, value: T) -> Result<(), (SmaeStatus, String)> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Message of the last failed call on this thread. Valid until the next
/// call into the library from the same thread.
#[no_mangle]
pub extern "C" fn smae_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn smae_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Creates a cloud from `n` packed `x y z` triples.
#[no_mangle]
pub unsafe extern "C" fn smae_cloud_new(
    xyz: *const f64,
    n: usize,
    out: *mut *mut SmaeCloud,
) -> SmaeStatus {
    guard(|| {
        if xyz.is_null() {
            return Err(null("xyz"));
        }
        let flat = std::slice::from_raw_parts(xyz, n * 3);
        let points = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let inner = PointCloud::new(points).map_err(lib)?;
        publish(out, SmaeCloud { inner })
    })
}

/// Generates a labelled synthetic shape: `kind` is one of plane, chair,
/// table, rocket.
#[no_mangle]
pub unsafe extern "C" fn smae_make_shape(
    kind: *const c_char,
    n: usize,
    seed: u64,
    out: *mut *mut SmaeCloud,
) -> SmaeStatus {
    guard(|| {
        let kind: ShapeKind = str_arg(kind, "kind")?.parse().map_err(lib)?;
        let inner = geometry::make_shape(kind, n, seed).map_err(lib)?;
        publish(out, SmaeCloud { inner })
    })
}

/// Reads a text cloud (`x y z [label]` per line).
#[no_mangle]
pub unsafe extern "C" fn smae_cloud_read(
    path: *const c_char,
    out: *mut *mut SmaeCloud,
) -> SmaeStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let inner = geometry::read_cloud_file(Path::new(path)).map_err(lib)?;
        publish(out, SmaeCloud { inner })
    })
}

#[no_mangle]
pub unsafe extern "C" fn smae_cloud_free(cloud: *mut SmaeCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

/// Number of points, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn smae_cloud_len(cloud: *const SmaeCloud) -> usize {
    cloud.as_ref().map_or(0, |c| c.inner.len())
}

/// Copies the coordinates into `out`, which must hold `3 * len` doubles.
#[no_mangle]
pub unsafe extern "C" fn smae_cloud_points(
    cloud: *const SmaeCloud,
    out: *mut f64,
    capacity: usize,
) -> SmaeStatus {
    guard(|| {
        let c = cloud_ref(cloud)?;
        if capacity < c.len() * 3 {
            return Err((
                SmaeStatus::InvalidArgument,
                format!("need {} doubles", c.len() * 3),
            ));
        }
        let dst = out_slice(out, c.len() * 3, "out")?;
        for (d, s) in dst.iter_mut().zip(c.points.iter().flatten()) {
            *d = *s;
        }
        Ok(())
    })
}

/// Copies per-point labels into `out` (`len` entries). Fails with
/// `SMAE_STATUS_INVALID_ARGUMENT` for unlabelled clouds.
#[no_mangle]
pub unsafe extern "C" fn smae_cloud_labels(
    cloud: *const SmaeCloud,
    out: *mut usize,
    capacity: usize,
) -> SmaeStatus {
    guard(|| {
        let c = cloud_ref(cloud)?;
        let labels = c.labels.as_ref().ok_or((
            SmaeStatus::InvalidArgument,
            "cloud has no labels".to_string(),
        ))?;
        if capacity < labels.len() {
            return Err((
                SmaeStatus::InvalidArgument,
                format!("need {} labels", labels.len()),
            ));
        }
        out_slice(out, labels.len(), "out")?.copy_from_slice(labels);
        Ok(())
    })
}

/// Symmetric squared-L2 Chamfer distance.
#[no_mangle]
pub unsafe extern "C" fn smae_chamfer(
    a: *const SmaeCloud,
    b: *const SmaeCloud,
    out: *mut f64,
) -> SmaeStatus {
    guard(|| {
        let d = geometry::chamfer(&cloud_ref(a)?.points, &cloud_ref(b)?.points).map_err(lib)?;
        *out_slice(out, 1, "out")?.first_mut().expect("one slot") = d;
        Ok(())
    })
}

/// Farthest-point sampling of `count` indices starting at `start`.
#[no_mangle]
pub unsafe extern "C" fn smae_fps(
    cloud: *const SmaeCloud,
    count: usize,
    start: usize,
    out: *mut usize,
) -> SmaeStatus {
    guard(|| {
        let picked = geometry::fps(&cloud_ref(cloud)?.points, count, start).map_err(lib)?;
        out_slice(out, count, "out")?.copy_from_slice(&picked);
        Ok(())
    })
}

/// `k` nearest neighbours of each center; writes `n_centers * k` indices,
/// row by row.
#[no_mangle]
pub unsafe extern "C" fn smae_knn(
    cloud: *const SmaeCloud,
    centers: *const usize,
    n_centers: usize,
    k: usize,
    out: *mut usize,
) -> SmaeStatus {
    guard(|| {
        if centers.is_null() {
            return Err(null("centers"));
        }
        let centers = std::slice::from_raw_parts(centers, n_centers);
        let hoods = geometry::knn(&cloud_ref(cloud)?.points, centers, k).map_err(lib)?;
        let dst = out_slice(out, n_centers * k, "out")?;
        for (row, h) in dst.chunks_exact_mut(k).zip(&hoods) {
            row.copy_from_slice(&h.member_indices);
        }
        Ok(())
    })
}

/// Component-aware mask over `g` tokens. Writes 1 (masked) or 0 per token.
#[no_mangle]
pub unsafe extern "C" fn smae_csem_mask(
    assignment: *const usize,
    g: usize,
    components: usize,
    ratio: f64,
    seed: u64,
    out: *mut u8,
) -> SmaeStatus {
    guard(|| {
        if assignment.is_null() {
            return Err(null("assignment"));
        }
        let a = std::slice::from_raw_parts(assignment, g);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = smae::masking::csem_mask(a, components, ratio, &mut rng).map_err(lib)?;
        for (d, &m) in out_slice(out, g, "out")?.iter_mut().zip(&plan.masked) {
            *d = m as u8;
        }
        Ok(())
    })
}

/// Loads a pretraining checkpoint; its embedded configuration defines the
/// architecture.
#[no_mangle]
pub unsafe extern "C" fn smae_model_load(
    path: *const c_char,
    out: *mut *mut SmaeModel,
) -> SmaeStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let checkpoint = Checkpoint::load(Path::new(path)).map_err(lib)?;
        let mut expected = smae::model::SemanticMae::init_store(&checkpoint.config).map_err(lib)?;
        checkpoint.load_into(&mut expected).map_err(lib)?;
        publish(
            out,
            SmaeModel {
                config: checkpoint.config.clone(),
                checkpoint,
            },
        )
    })
}

#[no_mangle]
pub unsafe extern "C" fn smae_model_free(model: *mut SmaeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of prototypes (possible component labels), or 0 for null.
#[no_mangle]
pub unsafe extern "C" fn smae_model_prototypes(model: *const SmaeModel) -> usize {
    model.as_ref().map_or(0, |m| m.config.prototypes)
}

/// Labels every point of `cloud` with a component id in
/// `[0, smae_model_prototypes)`; `out` holds `smae_cloud_len` entries.
#[no_mangle]
pub unsafe extern "C" fn smae_export_groups(
    model: *const SmaeModel,
    cloud: *const SmaeCloud,
    out: *mut usize,
) -> SmaeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let c = cloud_ref(cloud)?;
        let groups = smae::pipeline::export::export_groups(&m.config, &m.checkpoint.store, c)
            .map_err(lib)?;
        out_slice(out, c.len(), "out")?.copy_from_slice(&groups.labels);
        Ok(())
    })
}
