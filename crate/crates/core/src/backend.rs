//! Kernel execution engine.
//!
//! [`SimBackend`] is a deterministic simulated device: kernels run on the host
//! over the logical thread grid, and costs come from a [`TimingModel`] rather
//! than a wall clock. A hardware backend would implement [`Backend`] directly.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::SimDuration;
use crate::protocol::{LaunchDims, ScalarLiteral};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("unknown kernel {0}")]
    UnknownKernel(String),
    #[error("kernel {0} is already registered")]
    DuplicateKernel(String),
    #[error("kernel {kernel}: {detail}")]
    ArityMismatch { kernel: String, detail: String },
    #[error("kernel {kernel} fault: {detail}")]
    Fault { kernel: String, detail: String },
    #[error("timing parameter {0} must be finite and > 0")]
    InvalidTiming(&'static str),
}

/// Analytic cost model for the simulated device.
///
/// Bandwidths are bytes per virtual second, latencies are virtual seconds
/// and `flop_rate` is fused multiply-adds per virtual second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingModel {
    pub h2d_bandwidth: f64,
    pub d2h_bandwidth: f64,
    pub fetch_latency: f64,
    pub launch_overhead: f64,
    pub flop_rate: f64,
}

impl Default for TimingModel {
    fn default() -> Self {
        const GIB: f64 = (1u64 << 30) as f64;
        TimingModel {
            h2d_bandwidth: 12.0 * GIB,
            d2h_bandwidth: 12.0 * GIB,
            fetch_latency: 200e-6,
            launch_overhead: 10e-6,
            flop_rate: 1e12,
        }
    }
}

impl TimingModel {
    pub fn validate(&self) -> Result<(), BackendError> {
        let fields = [
            ("h2d_bandwidth", self.h2d_bandwidth),
            ("d2h_bandwidth", self.d2h_bandwidth),
            ("fetch_latency", self.fetch_latency),
            ("launch_overhead", self.launch_overhead),
            ("flop_rate", self.flop_rate),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(BackendError::InvalidTiming(name));
            }
        }
        Ok(())
    }

    /// `fetch_latency + bytes / h2d_bandwidth`, each term rounded to the
    /// picosecond.
    pub fn estimate_fetch_time(&self, bytes: u64) -> SimDuration {
        SimDuration::from_secs_f64(self.fetch_latency)
            + SimDuration::from_secs_f64(bytes as f64 / self.h2d_bandwidth)
    }

    pub fn estimate_flush_time(&self, bytes: u64) -> SimDuration {
        SimDuration::from_secs_f64(bytes as f64 / self.d2h_bandwidth)
    }

    pub fn launch_time(&self) -> SimDuration {
        SimDuration::from_secs_f64(self.launch_overhead)
    }

    pub fn compute_time(&self, fma_count: u64) -> SimDuration {
        SimDuration::from_secs_f64(fma_count as f64 / self.flop_rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LiteralType {
    I32,
    I64,
    F32,
    F64,
}

impl LiteralType {
    pub fn matches(self, lit: &ScalarLiteral) -> bool {
        matches!(
            (self, lit),
            (LiteralType::I32, ScalarLiteral::I32(_))
                | (LiteralType::I64, ScalarLiteral::I64(_))
                | (LiteralType::F32, ScalarLiteral::F32(_))
                | (LiteralType::F64, ScalarLiteral::F64(_))
        )
    }
}

/// How a kernel uses the buffer in a given argument slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArgRole {
    Read,
    Write,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelSignature {
    pub literals: Vec<LiteralType>,
    pub buffers: Vec<ArgRole>,
}

impl KernelSignature {
    pub fn new(literals: &[LiteralType], buffers: &[ArgRole]) -> Self {
        KernelSignature {
            literals: literals.to_vec(),
            buffers: buffers.to_vec(),
        }
    }

    fn check(&self, kernel: &str, literals: &[ScalarLiteral], buffers: usize) -> Result<(), BackendError> {
        let mismatch = |detail: String| BackendError::ArityMismatch {
            kernel: kernel.to_string(),
            detail,
        };
        if literals.len() != self.literals.len() {
            return Err(mismatch(format!(
                "expected {} literals, got {}",
                self.literals.len(),
                literals.len()
            )));
        }
        for (i, (ty, lit)) in self.literals.iter().zip(literals).enumerate() {
            if !ty.matches(lit) {
                return Err(mismatch(format!(
                    "literal {i} should be {ty:?}, got {}",
                    lit.type_name()
                )));
            }
        }
        if buffers != self.buffers.len() {
            return Err(mismatch(format!(
                "expected {} buffers, got {buffers}",
                self.buffers.len()
            )));
        }
        Ok(())
    }
}

/// A kernel's window onto one device buffer.
#[derive(Debug)]
pub enum BufferView<'a> {
    Read(&'a [u8]),
    Write(&'a mut [u8]),
}

impl BufferView<'_> {
    pub fn bytes(&self) -> &[u8] {
        match self {
            BufferView::Read(b) => b,
            BufferView::Write(b) => b,
        }
    }

    pub fn bytes_mut(&mut self) -> Option<&mut [u8]> {
        match self {
            BufferView::Read(_) => None,
            BufferView::Write(b) => Some(b),
        }
    }

    pub fn len(&self) -> usize {
        self.bytes().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn read_f32(buf: &[u8], i: usize) -> f32 {
    let at = i * 4;
    f32::from_le_bytes([buf[at], buf[at + 1], buf[at + 2], buf[at + 3]])
}

pub fn write_f32(buf: &mut [u8], i: usize, v: f32) {
    buf[i * 4..i * 4 + 4].copy_from_slice(&v.to_le_bytes());
}

/// Little-endian bytes of `values`.
pub fn encode_f32s(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Inverse of [`encode_f32s`]; trailing bytes that do not fill an f32 are
/// ignored.
pub fn decode_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Runs `body(g)` for every global thread id `g` in ascending order that is
/// below `n`; threads at or past `n` are no-ops, so only the total thread
/// count matters, not its grid/block split.
pub fn for_each_thread(dims: &LaunchDims, n: u64, mut body: impl FnMut(u64)) {
    let active = dims.total_threads().min(n);
    for g in 0..active {
        body(g);
    }
}

/// A device function callable through the registry.
pub trait Kernel: Send + Sync {
    fn signature(&self) -> KernelSignature;

    /// Applies the kernel. `args` follow the signature's buffer order and
    /// roles; the arity has already been checked. Returns the number of
    /// fused multiply-adds charged for the launch.
    fn launch(
        &self,
        dims: &LaunchDims,
        literals: &[ScalarLiteral],
        args: &mut [BufferView<'_>],
    ) -> Result<u64, BackendError>;
}

/// Immutable-after-startup map from kernel id to implementation.
#[derive(Clone, Default)]
pub struct KernelRegistry {
    kernels: BTreeMap<String, Arc<dyn Kernel>>,
}

impl core::fmt::Debug for KernelRegistry {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_set().entries(self.kernels.keys()).finish()
    }
}

impl KernelRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Registry holding `vector_add`, `saxpy`, `matmul`, `reduce_sum` and
    /// `fill`.
    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        for (id, k) in builtins() {
            r.register(id, k).expect("builtin ids are distinct");
        }
        r
    }

    pub fn register(&mut self, kernel_id: impl Into<String>, kernel: Box<dyn Kernel>) -> Result<(), BackendError> {
        let id = kernel_id.into();
        if self.kernels.contains_key(&id) {
            return Err(BackendError::DuplicateKernel(id));
        }
        self.kernels.insert(id, Arc::from(kernel));
        Ok(())
    }

    pub fn get(&self, kernel_id: &str) -> Result<&Arc<dyn Kernel>, BackendError> {
        self.kernels
            .get(kernel_id)
            .ok_or_else(|| BackendError::UnknownKernel(kernel_id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.kernels.keys().map(String::as_str)
    }
}

/// Execution engine behind an executor.
pub trait Backend {
    fn timing(&self) -> &TimingModel;

    fn signature(&self, kernel_id: &str) -> Result<KernelSignature, BackendError>;

    /// Runs one kernel and returns its simulated compute time.
    fn launch(
        &mut self,
        kernel_id: &str,
        dims: &LaunchDims,
        literals: &[ScalarLiteral],
        args: &mut [BufferView<'_>],
    ) -> Result<SimDuration, BackendError>;
}

#[derive(Debug, Clone)]
pub struct SimBackend {
    registry: Arc<KernelRegistry>,
    timing: TimingModel,
}

impl SimBackend {
    pub fn new(registry: Arc<KernelRegistry>, timing: TimingModel) -> Self {
        SimBackend { registry, timing }
    }

    pub fn with_builtins(timing: TimingModel) -> Self {
        Self::new(Arc::new(KernelRegistry::with_builtins()), timing)
    }

    /// Adds a kernel to this backend's registry. A registry shared with other
    /// backends is copied first, so they are unaffected.
    pub fn register_kernel(&mut self, kernel_id: impl Into<String>, kernel: Box<dyn Kernel>) -> Result<(), BackendError> {
        Arc::make_mut(&mut self.registry).register(kernel_id, kernel)
    }

    pub fn registry(&self) -> &Arc<KernelRegistry> {
        &self.registry
    }
}

impl Backend for SimBackend {
    fn timing(&self) -> &TimingModel {
        &self.timing
    }

    fn signature(&self, kernel_id: &str) -> Result<KernelSignature, BackendError> {
        Ok(self.registry.get(kernel_id)?.signature())
    }

    fn launch(
        &mut self,
        kernel_id: &str,
        dims: &LaunchDims,
        literals: &[ScalarLiteral],
        args: &mut [BufferView<'_>],
    ) -> Result<SimDuration, BackendError> {
        let kernel = self.registry.get(kernel_id)?;
        let sig = kernel.signature();
        sig.check(kernel_id, literals, args.len())?;
        for (i, (role, view)) in sig.buffers.iter().zip(args.iter()).enumerate() {
            if *role == ArgRole::Write && matches!(view, BufferView::Read(_)) {
                return Err(BackendError::ArityMismatch {
                    kernel: kernel_id.to_string(),
                    detail: format!("argument {i} is written but was passed read-only"),
                });
            }
        }
        let fma = kernel.launch(dims, literals, args)?;
        Ok(self.timing.compute_time(fma))
    }
}

fn fault(kernel: &str, detail: String) -> BackendError {
    BackendError::Fault {
        kernel: kernel.to_string(),
        detail,
    }
}

fn count(kernel: &str, lit: &ScalarLiteral, what: &str) -> Result<u64, BackendError> {
    match *lit {
        ScalarLiteral::I32(v) if v >= 0 => Ok(v as u64),
        _ => Err(fault(kernel, format!("{what} must be a non-negative i32"))),
    }
}

fn f32_lit(lit: &ScalarLiteral) -> f32 {
    match *lit {
        ScalarLiteral::F32(v) => v,
        _ => unreachable!("signature checked"),
    }
}

fn need(kernel: &str, view: &BufferView<'_>, arg: usize, elems: u64) -> Result<(), BackendError> {
    let bytes = elems.saturating_mul(4);
    if (view.len() as u64) < bytes {
        return Err(fault(
            kernel,
            format!("argument {arg} holds {} bytes, needs {bytes}", view.len()),
        ));
    }
    Ok(())
}

fn split_out<'v, 'a>(args: &'v mut [BufferView<'a>]) -> (&'v [BufferView<'a>], &'v mut [u8]) {
    let (out, inputs) = args.split_last_mut().expect("signature has an output");
    (inputs, out.bytes_mut().expect("role checked"))
}

use ArgRole::{Read as R, Write as W};
use LiteralType::{F32 as LF32, I32 as LI32};

fn builtins() -> Vec<(&'static str, Box<dyn Kernel>)> {
    vec![
        ("vector_add", Box::new(VectorAdd)),
        ("saxpy", Box::new(Saxpy)),
        ("matmul", Box::new(Matmul)),
        ("reduce_sum", Box::new(ReduceSum)),
        ("fill", Box::new(Fill)),
    ]
}

/// `OUT[g] = X[g] + Y[g]`
struct VectorAdd;

impl Kernel for VectorAdd {
    fn signature(&self) -> KernelSignature {
        KernelSignature::new(&[LI32], &[R, R, W])
    }

    fn launch(&self, dims: &LaunchDims, literals: &[ScalarLiteral], args: &mut [BufferView<'_>]) -> Result<u64, BackendError> {
        const ID: &str = "vector_add";
        let n = count(ID, &literals[0], "n")?;
        for (i, a) in args.iter().enumerate() {
            need(ID, a, i, n)?;
        }
        let (inputs, out) = split_out(args);
        let (x, y) = (inputs[0].bytes(), inputs[1].bytes());
        for_each_thread(dims, n, |g| {
            let g = g as usize;
            write_f32(out, g, read_f32(x, g) + read_f32(y, g));
        });
        Ok(n)
    }
}

/// `OUT[g] = a * X[g] + Y[g]`
struct Saxpy;

impl Kernel for Saxpy {
    fn signature(&self) -> KernelSignature {
        KernelSignature::new(&[LI32, LF32], &[R, R, W])
    }

    fn launch(&self, dims: &LaunchDims, literals: &[ScalarLiteral], args: &mut [BufferView<'_>]) -> Result<u64, BackendError> {
        const ID: &str = "saxpy";
        let n = count(ID, &literals[0], "n")?;
        let a = f32_lit(&literals[1]);
        for (i, v) in args.iter().enumerate() {
            need(ID, v, i, n)?;
        }
        let (inputs, out) = split_out(args);
        let (x, y) = (inputs[0].bytes(), inputs[1].bytes());
        for_each_thread(dims, n, |g| {
            let g = g as usize;
            write_f32(out, g, a * read_f32(x, g) + read_f32(y, g));
        });
        Ok(n)
    }
}

/// Row-major `OUT[n x m] = A[n x k] * B[k x m]`. Thread `g` owns cell
/// `(g / m, g % m)` and accumulates in ascending inner index into one f32.
struct Matmul;

impl Kernel for Matmul {
    fn signature(&self) -> KernelSignature {
        KernelSignature::new(&[LI32, LI32, LI32], &[R, R, W])
    }

    fn launch(&self, dims: &LaunchDims, literals: &[ScalarLiteral], args: &mut [BufferView<'_>]) -> Result<u64, BackendError> {
        const ID: &str = "matmul";
        let n = count(ID, &literals[0], "n")?;
        let m = count(ID, &literals[1], "m")?;
        let k = count(ID, &literals[2], "k")?;
        need(ID, &args[0], 0, n.saturating_mul(k))?;
        need(ID, &args[1], 1, k.saturating_mul(m))?;
        need(ID, &args[2], 2, n.saturating_mul(m))?;
        let (inputs, out) = split_out(args);
        let (a, b) = (inputs[0].bytes(), inputs[1].bytes());
        let (m, k) = (m as usize, k as usize);
        for_each_thread(dims, n * m as u64, |g| {
            let g = g as usize;
            let (row, col) = (g / m, g % m);
            let mut acc = 0.0f32;
            for p in 0..k {
                acc += read_f32(a, row * k + p) * read_f32(b, p * m + col);
            }
            write_f32(out, g, acc);
        });
        Ok(n.saturating_mul(m as u64).saturating_mul(k as u64))
    }
}

/// `OUT[0] = X[0] + X[1] + ... + X[n-1]`, one pass, one accumulator.
struct ReduceSum;

impl Kernel for ReduceSum {
    fn signature(&self) -> KernelSignature {
        KernelSignature::new(&[LI32], &[R, W])
    }

    fn launch(&self, dims: &LaunchDims, literals: &[ScalarLiteral], args: &mut [BufferView<'_>]) -> Result<u64, BackendError> {
        const ID: &str = "reduce_sum";
        let n = count(ID, &literals[0], "n")?;
        need(ID, &args[0], 0, n)?;
        need(ID, &args[1], 1, 1)?;
        let (inputs, out) = split_out(args);
        let x = inputs[0].bytes();
        for_each_thread(dims, 1, |_| {
            let mut acc = 0.0f32;
            for i in 0..n as usize {
                acc += read_f32(x, i);
            }
            write_f32(out, 0, acc);
        });
        Ok(n)
    }
}

/// `OUT[g] = v`
struct Fill;

impl Kernel for Fill {
    fn signature(&self) -> KernelSignature {
        KernelSignature::new(&[LI32, LF32], &[W])
    }

    fn launch(&self, dims: &LaunchDims, literals: &[ScalarLiteral], args: &mut [BufferView<'_>]) -> Result<u64, BackendError> {
        const ID: &str = "fill";
        let n = count(ID, &literals[0], "n")?;
        let v = f32_lit(&literals[1]);
        need(ID, &args[0], 0, n)?;
        let out = args[0].bytes_mut().expect("role checked");
        for_each_thread(dims, n, |g| write_f32(out, g as usize, v));
        Ok(n)
    }
}
