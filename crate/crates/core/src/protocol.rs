//! Request/response data model shared by clients, router and executors.
//!
//! All types are plain immutable values. The JSON wire form is produced by
//! the serde derives here; the `kaas` crate wraps them with strict/lenient
//! decoding.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::de::{self, Deserializer};
use serde::ser::{SerializeStruct, Serializer};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::SimDuration;
use crate::store::is_valid_key;

/// Upper bound on `grid * block` thread count for a single launch.
pub const MAX_TOTAL_THREADS: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LaunchDims {
    pub grid_x: u32,
    pub grid_y: u32,
    pub grid_z: u32,
    pub block_x: u32,
    pub block_y: u32,
    pub block_z: u32,
}

impl LaunchDims {
    pub const fn new(grid: [u32; 3], block: [u32; 3]) -> Self {
        LaunchDims {
            grid_x: grid[0],
            grid_y: grid[1],
            grid_z: grid[2],
            block_x: block[0],
            block_y: block[1],
            block_z: block[2],
        }
    }

    /// One-dimensional launch of `blocks` blocks with `threads` threads each.
    pub const fn linear(blocks: u32, threads: u32) -> Self {
        LaunchDims::new([blocks, 1, 1], [threads, 1, 1])
    }

    /// Smallest one-dimensional launch with at least `n` threads, using
    /// blocks of at most 256 threads.
    pub fn covering(n: u64) -> Self {
        let n = n.max(1);
        let block = n.min(256) as u32;
        let grid = n.div_ceil(block as u64).min(u32::MAX as u64) as u32;
        LaunchDims::linear(grid, block)
    }

    fn components(&self) -> [u32; 6] {
        [
            self.grid_x,
            self.grid_y,
            self.grid_z,
            self.block_x,
            self.block_y,
            self.block_z,
        ]
    }

    /// Product of all six components, saturating well above
    /// [`MAX_TOTAL_THREADS`].
    pub fn total_threads(&self) -> u64 {
        self.components()
            .iter()
            .fold(1u64, |acc, &c| acc.saturating_mul(c as u64))
    }

    pub fn is_valid(&self) -> bool {
        self.components().iter().all(|&c| c >= 1) && self.total_threads() <= MAX_TOTAL_THREADS
    }
}

/// A scalar kernel argument.
///
/// Equality treats every NaN of a given width as equal and otherwise
/// compares floats bitwise, so `0.0 != -0.0`.
#[derive(Debug, Clone, Copy)]
pub enum ScalarLiteral {
    I32(i32),
    I64(i64),
    F32(f32),
    F64(f64),
}

impl ScalarLiteral {
    pub fn type_name(&self) -> &'static str {
        match self {
            ScalarLiteral::I32(_) => "i32",
            ScalarLiteral::I64(_) => "i64",
            ScalarLiteral::F32(_) => "f32",
            ScalarLiteral::F64(_) => "f64",
        }
    }
}

impl PartialEq for ScalarLiteral {
    fn eq(&self, other: &Self) -> bool {
        use ScalarLiteral::*;
        match (self, other) {
            (I32(a), I32(b)) => a == b,
            (I64(a), I64(b)) => a == b,
            (F32(a), F32(b)) => (a.is_nan() && b.is_nan()) || a.to_bits() == b.to_bits(),
            (F64(a), F64(b)) => (a.is_nan() && b.is_nan()) || a.to_bits() == b.to_bits(),
            _ => false,
        }
    }
}

/// Non-finite floats travel as strings since JSON has no literal for them.
fn special_float_name(v: f64) -> Option<&'static str> {
    if v.is_nan() {
        Some("NaN")
    } else if v == f64::INFINITY {
        Some("Infinity")
    } else if v == f64::NEG_INFINITY {
        Some("-Infinity")
    } else {
        None
    }
}

fn parse_special_float<E: de::Error>(s: &str) -> Result<f64, E> {
    match s {
        "NaN" => Ok(f64::NAN),
        "Infinity" => Ok(f64::INFINITY),
        "-Infinity" => Ok(f64::NEG_INFINITY),
        other => Err(E::invalid_value(
            de::Unexpected::Str(other),
            &"a number, \"NaN\", \"Infinity\" or \"-Infinity\"",
        )),
    }
}

impl Serialize for ScalarLiteral {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut st = serializer.serialize_struct("ScalarLiteral", 2)?;
        st.serialize_field("type", self.type_name())?;
        match *self {
            ScalarLiteral::I32(v) => st.serialize_field("value", &v)?,
            ScalarLiteral::I64(v) => st.serialize_field("value", &v)?,
            ScalarLiteral::F32(v) => match special_float_name(v as f64) {
                Some(name) => st.serialize_field("value", name)?,
                None => st.serialize_field("value", &v)?,
            },
            ScalarLiteral::F64(v) => match special_float_name(v) {
                Some(name) => st.serialize_field("value", name)?,
                None => st.serialize_field("value", &v)?,
            },
        }
        st.end()
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum F32Repr {
    Num(f32),
    Text(String),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum F64Repr {
    Num(f64),
    Text(String),
}

#[derive(Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "lowercase")]
enum LiteralRepr {
    I32(i32),
    I64(i64),
    F32(F32Repr),
    F64(F64Repr),
}

impl<'de> Deserialize<'de> for ScalarLiteral {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        Ok(match LiteralRepr::deserialize(deserializer)? {
            LiteralRepr::I32(v) => ScalarLiteral::I32(v),
            LiteralRepr::I64(v) => ScalarLiteral::I64(v),
            LiteralRepr::F32(F32Repr::Num(v)) => ScalarLiteral::F32(v),
            LiteralRepr::F32(F32Repr::Text(s)) => ScalarLiteral::F32(parse_special_float(&s)? as f32),
            LiteralRepr::F64(F64Repr::Num(v)) => ScalarLiteral::F64(v),
            LiteralRepr::F64(F64Repr::Text(s)) => ScalarLiteral::F64(parse_special_float(&s)?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Input,
    Output,
    Inout,
}

impl Direction {
    pub fn reads(self) -> bool {
        matches!(self, Direction::Input | Direction::Inout)
    }

    pub fn writes(self) -> bool {
        matches!(self, Direction::Output | Direction::Inout)
    }
}

/// A named buffer in a request's buffer table.
///
/// `key` is `None` exactly for ephemeral buffers. Keys are kept as raw
/// strings here so that malformed keys surface as validation violations
/// rather than decode failures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferArg {
    pub name: String,
    #[serde(default)]
    pub key: Option<String>,
    pub size: u64,
    #[serde(default)]
    pub is_const: bool,
    #[serde(default)]
    pub is_ephemeral: bool,
    pub direction: Direction,
}

impl BufferArg {
    /// Cacheable read-only input backed by `key`.
    pub fn constant(name: impl Into<String>, key: impl Into<String>, size: u64) -> Self {
        BufferArg {
            name: name.into(),
            key: Some(key.into()),
            size,
            is_const: true,
            is_ephemeral: false,
            direction: Direction::Input,
        }
    }

    /// Store-backed buffer that is re-fetched on every request.
    pub fn stored(
        name: impl Into<String>,
        key: impl Into<String>,
        size: u64,
        direction: Direction,
    ) -> Self {
        BufferArg {
            name: name.into(),
            key: Some(key.into()),
            size,
            is_const: false,
            is_ephemeral: false,
            direction,
        }
    }

    pub fn output(name: impl Into<String>, key: impl Into<String>, size: u64) -> Self {
        Self::stored(name, key, size, Direction::Output)
    }

    pub fn ephemeral(name: impl Into<String>, size: u64) -> Self {
        BufferArg {
            name: name.into(),
            key: None,
            size,
            is_const: false,
            is_ephemeral: true,
            direction: Direction::Inout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelInvocation {
    pub kernel_id: String,
    pub dims: LaunchDims,
    #[serde(default)]
    pub literals: Vec<ScalarLiteral>,
    #[serde(default)]
    pub args: Vec<String>,
}

/// The unit of submission: buffers plus an ordered list of invocations.
///
/// `buffers` keeps client order, which is also the executor's resolution
/// order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KaasRequest {
    pub request_id: String,
    #[serde(default)]
    pub buffers: Vec<BufferArg>,
    #[serde(default)]
    pub invocations: Vec<KernelInvocation>,
}

impl KaasRequest {
    pub fn new(request_id: impl Into<String>) -> Self {
        KaasRequest {
            request_id: request_id.into(),
            buffers: Vec::new(),
            invocations: Vec::new(),
        }
    }

    pub fn buffer(&self, name: &str) -> Option<&BufferArg> {
        self.buffers.iter().find(|b| b.name == name)
    }

    /// Store keys of const inputs, with their declared sizes.
    pub fn const_keys(&self) -> impl Iterator<Item = (&str, u64)> {
        self.buffers
            .iter()
            .filter(|b| b.is_const)
            .filter_map(|b| b.key.as_deref().map(|k| (k, b.size)))
    }

    /// Store keys of non-ephemeral buffers the request may write.
    pub fn output_keys(&self) -> impl Iterator<Item = (&str, u64)> {
        self.buffers
            .iter()
            .filter(|b| !b.is_ephemeral && b.direction.writes())
            .filter_map(|b| b.key.as_deref().map(|k| (k, b.size)))
    }
}

/// Two chained square matmuls: `C = A * B` into an ephemeral, then
/// `D = C * C` into `out_key`. `A` and `B` are const inputs.
pub fn matmul_chain(request_id: impl Into<String>, dim: u32, a_key: &str, b_key: &str, out_key: &str) -> KaasRequest {
    use alloc::string::ToString;

    let bytes = dim as u64 * dim as u64 * 4;
    let lits = alloc::vec![ScalarLiteral::I32(dim as i32); 3];
    let dims = LaunchDims::covering(dim as u64 * dim as u64);
    let call = |args: [&str; 3]| KernelInvocation {
        kernel_id: "matmul".into(),
        dims,
        literals: lits.clone(),
        args: args.iter().map(|a| a.to_string()).collect(),
    };
    KaasRequest {
        request_id: request_id.into(),
        buffers: alloc::vec![
            BufferArg::constant("A", a_key, bytes),
            BufferArg::constant("B", b_key, bytes),
            BufferArg::ephemeral("C", bytes),
            BufferArg::output("D", out_key, bytes),
        ],
        invocations: alloc::vec![call(["A", "B", "C"]), call(["C", "C", "D"])],
    }
}

/// One reason a request is rejected before execution.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("request_id is empty")]
    EmptyRequestId,
    #[error("buffer #{0} has an empty name")]
    EmptyBufferName(usize),
    #[error("duplicate buffer name {0}")]
    DuplicateBufferName(String),
    #[error("buffer {0}: size must be > 0")]
    ZeroSize(String),
    #[error("buffer {0}: const∧ephemeral forbidden")]
    ConstEphemeral(String),
    #[error("buffer {0}: const buffers must have direction input")]
    ConstNotInput(String),
    #[error("buffer {0}: ephemeral buffers must not carry a key")]
    EphemeralWithKey(String),
    #[error("buffer {0}: non-ephemeral buffers need a key")]
    MissingKey(String),
    #[error("buffer {name}: invalid store key {key:?}")]
    InvalidKey { name: String, key: String },
    #[error("key {0} bound by several buffers that are not all const")]
    SharedMutableKey(String),
    #[error("invocation {0}: empty kernel_id")]
    EmptyKernelId(usize),
    #[error("invocation {0}: every launch dimension must be >= 1 and total threads <= 2^32")]
    InvalidDims(usize),
    #[error("invocation {invocation}: unknown buffer {name}")]
    UnknownBuffer { invocation: usize, name: String },
}

/// Checks every structural invariant of `req`. Violations are the return
/// value; this never fails on arbitrary decoded input.
pub fn validate_request(req: &KaasRequest) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    if req.request_id.is_empty() {
        out.push(Violation::EmptyRequestId);
    }

    let mut names = BTreeSet::new();
    let mut key_users: BTreeMap<&str, (usize, bool)> = BTreeMap::new();
    for (i, b) in req.buffers.iter().enumerate() {
        if b.name.is_empty() {
            out.push(Violation::EmptyBufferName(i));
        } else if !names.insert(b.name.as_str()) {
            out.push(Violation::DuplicateBufferName(b.name.clone()));
        }
        if b.size == 0 {
            out.push(Violation::ZeroSize(b.name.clone()));
        }
        if b.is_const && b.is_ephemeral {
            out.push(Violation::ConstEphemeral(b.name.clone()));
        }
        if b.is_const && b.direction != Direction::Input {
            out.push(Violation::ConstNotInput(b.name.clone()));
        }
        match (&b.key, b.is_ephemeral) {
            (Some(_), true) => out.push(Violation::EphemeralWithKey(b.name.clone())),
            (None, false) => out.push(Violation::MissingKey(b.name.clone())),
            (Some(k), false) => {
                if !is_valid_key(k) {
                    out.push(Violation::InvalidKey {
                        name: b.name.clone(),
                        key: k.clone(),
                    });
                }
                let entry = key_users.entry(k.as_str()).or_insert((0, true));
                entry.0 += 1;
                entry.1 &= b.is_const;
            }
            (None, true) => {}
        }
    }
    for (key, (users, all_const)) in key_users {
        if users > 1 && !all_const {
            out.push(Violation::SharedMutableKey(key.into()));
        }
    }

    for (i, inv) in req.invocations.iter().enumerate() {
        if inv.kernel_id.is_empty() {
            out.push(Violation::EmptyKernelId(i));
        }
        if !inv.dims.is_valid() {
            out.push(Violation::InvalidDims(i));
        }
        for name in &inv.args {
            if !names.contains(name.as_str()) {
                out.push(Violation::UnknownBuffer {
                    invocation: i,
                    name: name.clone(),
                });
            }
        }
    }

    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorKind {
    /// Request failed validation.
    InvalidRequest,
    /// Request body could not be decoded.
    MalformedRequest,
    NotFound,
    SizeMismatch,
    OutOfDeviceMemory,
    UnknownKernel,
    ArityMismatch,
    BackendFault,
    BufferBusy,
    StoreFailure,
    NoExecutors,
    Internal,
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Error { kind: ErrorKind, message: String },
}

impl Status {
    pub fn is_ok(&self) -> bool {
        matches!(self, Status::Ok)
    }

    pub fn error_kind(&self) -> Option<ErrorKind> {
        match self {
            Status::Ok => None,
            Status::Error { kind, .. } => Some(*kind),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvocationStats {
    pub kernel_id: String,
    pub simulated_compute_time: SimDuration,
    pub launch_overhead: SimDuration,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoStats {
    pub store_gets: u64,
    pub store_puts: u64,
    pub bytes_fetched: u64,
    pub bytes_flushed: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
}

impl core::ops::AddAssign for IoStats {
    fn add_assign(&mut self, rhs: IoStats) {
        self.store_gets += rhs.store_gets;
        self.store_puts += rhs.store_puts;
        self.bytes_fetched += rhs.bytes_fetched;
        self.bytes_flushed += rhs.bytes_flushed;
        self.cache_hits += rhs.cache_hits;
        self.cache_misses += rhs.cache_misses;
    }
}

/// Durations are integer picoseconds of virtual time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KaasResponse {
    pub request_id: String,
    pub status: Status,
    #[serde(default)]
    pub per_invocation: Vec<InvocationStats>,
    #[serde(default)]
    pub io_stats: IoStats,
    #[serde(default)]
    pub simulated_total_time: SimDuration,
}

impl KaasResponse {
    pub fn error(request_id: impl Into<String>, kind: ErrorKind, message: impl Into<String>) -> Self {
        KaasResponse {
            request_id: request_id.into(),
            status: Status::Error {
                kind,
                message: message.into(),
            },
            per_invocation: Vec::new(),
            io_stats: IoStats::default(),
            simulated_total_time: SimDuration::ZERO,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn inv(kernel: &str, args: &[&str]) -> KernelInvocation {
        KernelInvocation {
            kernel_id: kernel.into(),
            dims: LaunchDims::linear(1, 1),
            literals: vec![],
            args: args.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn empty_request_is_valid() {
        assert_eq!(validate_request(&KaasRequest::new("r")), Ok(()));
    }

    #[test]
    fn const_ephemeral_is_rejected() {
        let mut req = KaasRequest::new("r");
        req.buffers.push(BufferArg {
            name: "a".into(),
            key: None,
            size: 4,
            is_const: true,
            is_ephemeral: true,
            direction: Direction::Input,
        });
        let v = validate_request(&req).unwrap_err();
        assert!(v.contains(&Violation::ConstEphemeral("a".into())));
        assert!(v[0].to_string().contains("const∧ephemeral forbidden"));
    }

    #[test]
    fn unknown_buffer_is_named() {
        let mut req = KaasRequest::new("r");
        req.invocations.push(inv("fill", &["zz"]));
        let v = validate_request(&req).unwrap_err();
        assert_eq!(
            v,
            vec![Violation::UnknownBuffer {
                invocation: 0,
                name: "zz".into()
            }]
        );
        assert_eq!(v[0].to_string(), "invocation 0: unknown buffer zz");
    }

    #[test]
    fn buffer_table_rules() {
        let mut req = KaasRequest::new("");
        req.buffers = vec![
            BufferArg::constant("a", "k", 4),
            BufferArg::constant("a", "k", 4),
            BufferArg::stored("b", "bad key", 0, Direction::Input),
            BufferArg {
                is_const: true,
                ..BufferArg::output("c", "k2", 4)
            },
            BufferArg {
                key: Some("x".into()),
                ..BufferArg::ephemeral("e", 4)
            },
            BufferArg {
                key: None,
                ..BufferArg::output("o", "o", 4)
            },
            BufferArg::output("w", "k", 4),
        ];
        req.invocations.push(KernelInvocation {
            dims: LaunchDims::new([0, 1, 1], [1, 1, 1]),
            ..inv("", &[])
        });
        let v = validate_request(&req).unwrap_err();
        for expected in [
            Violation::EmptyRequestId,
            Violation::DuplicateBufferName("a".into()),
            Violation::ZeroSize("b".into()),
            Violation::InvalidKey {
                name: "b".into(),
                key: "bad key".into(),
            },
            Violation::ConstNotInput("c".into()),
            Violation::EphemeralWithKey("e".into()),
            Violation::MissingKey("o".into()),
            Violation::SharedMutableKey("k".into()),
            Violation::EmptyKernelId(0),
            Violation::InvalidDims(0),
        ] {
            assert!(v.contains(&expected), "missing {expected:?} in {v:?}");
        }
    }

    #[test]
    fn shared_const_keys_are_allowed() {
        let mut req = KaasRequest::new("r");
        req.buffers = vec![BufferArg::constant("a", "w", 4), BufferArg::constant("b", "w", 4)];
        assert_eq!(validate_request(&req), Ok(()));
    }

    #[test]
    fn thread_limit() {
        assert!(LaunchDims::new([1 << 16, 1, 1], [1 << 16, 1, 1]).is_valid());
        assert!(!LaunchDims::new([1 << 16, 2, 1], [1 << 16, 1, 1]).is_valid());
        assert!(!LaunchDims::new([u32::MAX; 3], [u32::MAX; 3]).is_valid());
        assert_eq!(LaunchDims::covering(257), LaunchDims::linear(2, 256));
        assert_eq!(LaunchDims::covering(3), LaunchDims::linear(1, 3));
    }

    #[test]
    fn nan_literals_compare_equal() {
        assert_eq!(ScalarLiteral::F32(f32::NAN), ScalarLiteral::F32(-f32::NAN));
        assert_ne!(ScalarLiteral::F64(0.0), ScalarLiteral::F64(-0.0));
        assert_ne!(ScalarLiteral::I32(1), ScalarLiteral::I64(1));
    }
}
