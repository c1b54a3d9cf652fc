//! Problem instances: users, model shapes, verifier timing, memory cap and
//! variable bounds, plus JSON ingestion with strict validation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost_model::{
    draft_flops, kv_memory, param_memory, step_latency, LatencyCoeffs, MemoryModel, ModelDims,
};
use crate::error::{Error, Result};

pub const DEFAULT_PREFIX_LEN: u64 = 512;
pub const DEFAULT_ACCEPT_RATE: f64 = 0.78;
pub const DEFAULT_COMM_LATENCY_MS: f64 = 3.0;
pub const DEFAULT_DRAFT_COEFFS: LatencyCoeffs = LatencyCoeffs {
    c: 4.0305e-11,
    beta: 33.8151,
};
pub const DEFAULT_DRAFT_DIMS: ModelDims = ModelDims {
    blocks: 28,
    hidden: 2048,
    ffn_hidden: 6144,
};
pub const DEFAULT_VERIFY_DIMS: ModelDims = ModelDims {
    blocks: 64,
    hidden: 5120,
    ffn_hidden: 25600,
};
pub const DEFAULT_VERIFY_COEFFS: LatencyCoeffs = LatencyCoeffs {
    c: 1.2077e-11,
    beta: 95.1074,
};
pub const DEFAULT_MEM_CAP_BYTES: u64 = 80_000_000_000;
pub const DEFAULT_BOUNDS: BoundSet = BoundSet {
    l_ub: 20,
    i_ub: 1024,
    t_ub: 1e6,
    s_ub: 3e6,
};

/// Per-user parameters of one request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserProfile {
    /// Current context length in tokens.
    pub prefix_len: u64,
    pub accept_rate: f64,
    pub comm_latency_ms: f64,
    pub draft_coeffs: LatencyCoeffs,
}

impl Default for UserProfile {
    fn default() -> Self {
        UserProfile {
            prefix_len: DEFAULT_PREFIX_LEN,
            accept_rate: DEFAULT_ACCEPT_RATE,
            comm_latency_ms: DEFAULT_COMM_LATENCY_MS,
            draft_coeffs: DEFAULT_DRAFT_COEFFS,
        }
    }
}

impl UserProfile {
    /// Latency of a single drafting step on the user's device.
    pub fn draft_step_ms(&self, draft_dims: &ModelDims) -> f64 {
        step_latency(
            1,
            draft_flops(self.prefix_len, draft_dims),
            &self.draft_coeffs,
        )
    }
}

/// Upper bounds on draft length, prefix length, stage duration and span.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSet {
    pub l_ub: u32,
    pub i_ub: u64,
    pub t_ub: f64,
    pub s_ub: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    pub users: Vec<UserProfile>,
    pub draft_dims: ModelDims,
    pub verify_dims: ModelDims,
    pub verify_coeffs: LatencyCoeffs,
    pub mem_cap_bytes: u64,
    pub bounds: BoundSet,
}

impl ProblemInstance {
    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn memory(&self) -> MemoryModel {
        MemoryModel::for_model(&self.verify_dims, self.mem_cap_bytes)
    }

    pub fn accept_rates(&self) -> Vec<f64> {
        self.users.iter().map(|u| u.accept_rate).collect()
    }

    /// Copy with every user's acceptance rate replaced by `alpha`.
    pub fn with_accept_rate(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        for u in &mut out.users {
            u.accept_rate = alpha;
        }
        out
    }

    /// Copy with every latency quantity (both coefficient pairs and comm latency) scaled by `k`.
    pub fn with_latency_scale(&self, k: f64) -> Self {
        let mut out = self.clone();
        out.verify_coeffs = out.verify_coeffs.scaled(k);
        for u in &mut out.users {
            u.draft_coeffs = u.draft_coeffs.scaled(k);
            u.comm_latency_ms *= k;
        }
        out
    }

    /// Checks every invariant, reporting the first violation with its field path.
    pub fn validate(&self) -> Result<()> {
        if self.users.is_empty() {
            return Err(Error::validation("users", "at least one user is required"));
        }
        check_dims("draft_model", &self.draft_dims)?;
        check_dims("verify_model", &self.verify_dims)?;
        check_coeffs("verify_c", "verify_beta", &self.verify_coeffs)?;
        if self.mem_cap_bytes == 0 {
            return Err(Error::validation("mem_cap_bytes", "must be positive"));
        }
        let b = &self.bounds;
        if b.l_ub == 0 {
            return Err(Error::validation("bounds.l_ub", "must be at least 1"));
        }
        if b.i_ub == 0 {
            return Err(Error::validation("bounds.i_ub", "must be positive"));
        }
        if !(b.t_ub.is_finite() && b.t_ub > 0.0) {
            return Err(Error::validation(
                "bounds.t_ub",
                "must be positive and finite",
            ));
        }
        if !(b.s_ub.is_finite() && b.s_ub > 0.0) {
            return Err(Error::validation(
                "bounds.s_ub",
                "must be positive and finite",
            ));
        }
        if b.s_ub < b.t_ub {
            return Err(Error::validation(
                "bounds.s_ub",
                "must be at least bounds.t_ub",
            ));
        }
        for (k, u) in self.users.iter().enumerate() {
            let path = |field: &str| format!("users[{k}].{field}");
            if u.prefix_len == 0 {
                return Err(Error::validation(path("prefix_len"), "must be at least 1"));
            }
            if u.prefix_len > b.i_ub {
                return Err(Error::validation(
                    path("prefix_len"),
                    format!("{} exceeds bounds.i_ub = {}", u.prefix_len, b.i_ub),
                ));
            }
            if !(u.accept_rate > 0.0 && u.accept_rate < 1.0) {
                return Err(Error::validation(
                    path("accept_rate"),
                    format!("{} is outside (0, 1)", u.accept_rate),
                ));
            }
            if !(u.comm_latency_ms.is_finite() && u.comm_latency_ms >= 0.0) {
                return Err(Error::validation(
                    path("comm_latency_ms"),
                    "must be finite and nonnegative",
                ));
            }
            check_coeffs(&path("draft_c"), &path("draft_beta"), &u.draft_coeffs)?;
        }
        let max_prefix = self.users.iter().map(|u| u.prefix_len).max().unwrap_or(0);
        let single = param_memory(&self.verify_dims) + kv_memory(1, max_prefix, &self.verify_dims);
        if single > self.mem_cap_bytes {
            return Err(Error::validation(
                "mem_cap_bytes",
                format!(
                    "a single request with prefix {max_prefix} needs {single} B, above the cap of {} B",
                    self.mem_cap_bytes
                ),
            ));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: InstanceFile =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let inst = file.resolve()?;
        inst.validate()?;
        Ok(inst)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&InstanceFile::from(self)).expect("instance serializes")
    }
}

fn check_dims(path: &str, dims: &ModelDims) -> Result<()> {
    for (field, v) in [
        ("blocks", dims.blocks),
        ("hidden", dims.hidden),
        ("ffn_hidden", dims.ffn_hidden),
    ] {
        if v == 0 {
            return Err(Error::validation(
                format!("{path}.{field}"),
                "must be positive",
            ));
        }
    }
    Ok(())
}

fn check_coeffs(c_path: &str, beta_path: &str, coeffs: &LatencyCoeffs) -> Result<()> {
    if !(coeffs.c.is_finite() && coeffs.c >= 0.0) {
        return Err(Error::validation(c_path, "must be finite and nonnegative"));
    }
    if !(coeffs.beta.is_finite() && coeffs.beta >= 0.0) {
        return Err(Error::validation(
            beta_path,
            "must be finite and nonnegative",
        ));
    }
    Ok(())
}

/// `m` identical users at the reference operating point.
pub fn default_instance(m: usize) -> ProblemInstance {
    assert!(m >= 1, "at least one user is required");
    ProblemInstance {
        users: vec![UserProfile::default(); m],
        draft_dims: DEFAULT_DRAFT_DIMS,
        verify_dims: DEFAULT_VERIFY_DIMS,
        verify_coeffs: DEFAULT_VERIFY_COEFFS,
        mem_cap_bytes: DEFAULT_MEM_CAP_BYTES,
        bounds: DEFAULT_BOUNDS,
    }
}

/// Six-user instances varying a single factor:
/// 1 = prefix length, 2 = acceptance rate, 3 = draft-side latency scale.
pub fn heterogeneous_case(case_id: u8) -> Result<ProblemInstance> {
    let mut inst = default_instance(6);
    match case_id {
        1 => {
            for (u, i) in inst.users.iter_mut().zip([200, 320, 440, 560, 680, 800]) {
                u.prefix_len = i;
            }
        }
        2 => {
            for (u, a) in inst
                .users
                .iter_mut()
                .zip([0.80, 0.82, 0.84, 0.86, 0.88, 0.90])
            {
                u.accept_rate = a;
            }
        }
        3 => {
            for (u, k) in inst.users.iter_mut().zip([0.2, 0.5, 1.0, 3.0, 5.0, 7.0]) {
                u.draft_coeffs = DEFAULT_DRAFT_COEFFS.scaled(k);
            }
        }
        other => {
            return Err(Error::Domain(format!(
                "heterogeneous case must be 1, 2 or 3, got {other}"
            )))
        }
    }
    Ok(inst)
}

pub fn load_instance(path: impl AsRef<Path>) -> Result<ProblemInstance> {
    let text = fs::read_to_string(path)?;
    ProblemInstance::from_json_str(&text)
}

pub fn save_instance(inst: &ProblemInstance, path: impl AsRef<Path>) -> Result<()> {
    let mut text = inst.to_json_string();
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

// On-disk representation. Every field is optional so that `use_defaults` can
// fill gaps; without it, any missing field is a validation error.

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    use_defaults: Option<bool>,
    /// Only meaningful with `use_defaults` when `users` is omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    user_count: Option<usize>,
    #[serde(default)]
    users: Option<Vec<UserFile>>,
    #[serde(default)]
    draft_model: Option<ModelDims>,
    #[serde(default)]
    verify_model: Option<ModelDims>,
    #[serde(default)]
    verify_c: Option<f64>,
    #[serde(default)]
    verify_beta: Option<f64>,
    #[serde(default)]
    mem_cap_bytes: Option<serde_json::Number>,
    #[serde(default)]
    bounds: Option<BoundsFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UserFile {
    #[serde(default)]
    prefix_len: Option<u64>,
    #[serde(default)]
    accept_rate: Option<f64>,
    #[serde(default)]
    comm_latency_ms: Option<f64>,
    #[serde(default)]
    draft_c: Option<f64>,
    #[serde(default)]
    draft_beta: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoundsFile {
    #[serde(default)]
    l_ub: Option<u32>,
    #[serde(default)]
    i_ub: Option<u64>,
    #[serde(default)]
    t_ub: Option<f64>,
    #[serde(default)]
    s_ub: Option<f64>,
}

struct Filler {
    use_defaults: bool,
}

impl Filler {
    fn take<T>(&self, value: Option<T>, default: T, path: &str) -> Result<T> {
        match value {
            Some(v) => Ok(v),
            None if self.use_defaults => Ok(default),
            None => Err(Error::validation(
                path,
                "missing (set \"use_defaults\": true to fill from defaults)",
            )),
        }
    }
}

fn integral_bytes(n: &serde_json::Number, path: &str) -> Result<u64> {
    if let Some(v) = n.as_u64() {
        return Ok(v);
    }
    match n.as_f64() {
        Some(f) if f >= 0.0 && f.fract() == 0.0 && f <= u64::MAX as f64 => Ok(f as u64),
        _ => Err(Error::validation(
            path,
            format!("{n} is not a nonnegative integer"),
        )),
    }
}

impl InstanceFile {
    fn resolve(self) -> Result<ProblemInstance> {
        let fill = Filler {
            use_defaults: self.use_defaults.unwrap_or(false),
        };
        let users = match (self.users, self.user_count) {
            (Some(_), Some(_)) => {
                return Err(Error::validation(
                    "user_count",
                    "give either `users` or `user_count`, not both",
                ))
            }
            (Some(list), None) => list
                .into_iter()
                .enumerate()
                .map(|(k, u)| u.resolve(k, &fill))
                .collect::<Result<Vec<_>>>()?,
            (None, Some(m)) if fill.use_defaults => vec![UserProfile::default(); m],
            (None, Some(_)) => {
                return Err(Error::validation(
                    "user_count",
                    "only allowed together with \"use_defaults\": true",
                ))
            }
            (None, None) => return Err(Error::validation("users", "missing")),
        };
        let bounds = match self.bounds {
            Some(b) => BoundSet {
                l_ub: fill.take(b.l_ub, DEFAULT_BOUNDS.l_ub, "bounds.l_ub")?,
                i_ub: fill.take(b.i_ub, DEFAULT_BOUNDS.i_ub, "bounds.i_ub")?,
                t_ub: fill.take(b.t_ub, DEFAULT_BOUNDS.t_ub, "bounds.t_ub")?,
                s_ub: fill.take(b.s_ub, DEFAULT_BOUNDS.s_ub, "bounds.s_ub")?,
            },
            None => fill.take(None, DEFAULT_BOUNDS, "bounds")?,
        };
        let mem_cap_bytes = match self.mem_cap_bytes {
            Some(n) => integral_bytes(&n, "mem_cap_bytes")?,
            None => fill.take(None, DEFAULT_MEM_CAP_BYTES, "mem_cap_bytes")?,
        };
        Ok(ProblemInstance {
            users,
            draft_dims: fill.take(self.draft_model, DEFAULT_DRAFT_DIMS, "draft_model")?,
            verify_dims: fill.take(self.verify_model, DEFAULT_VERIFY_DIMS, "verify_model")?,
            verify_coeffs: LatencyCoeffs {
                c: fill.take(self.verify_c, DEFAULT_VERIFY_COEFFS.c, "verify_c")?,
                beta: fill.take(self.verify_beta, DEFAULT_VERIFY_COEFFS.beta, "verify_beta")?,
            },
            mem_cap_bytes,
            bounds,
        })
    }
}

impl UserFile {
    fn resolve(self, k: usize, fill: &Filler) -> Result<UserProfile> {
        let d = UserProfile::default();
        let path = |field: &str| format!("users[{k}].{field}");
        Ok(UserProfile {
            prefix_len: fill.take(self.prefix_len, d.prefix_len, &path("prefix_len"))?,
            accept_rate: fill.take(self.accept_rate, d.accept_rate, &path("accept_rate"))?,
            comm_latency_ms: fill.take(
                self.comm_latency_ms,
                d.comm_latency_ms,
                &path("comm_latency_ms"),
            )?,
            draft_coeffs: LatencyCoeffs {
                c: fill.take(self.draft_c, d.draft_coeffs.c, &path("draft_c"))?,
                beta: fill.take(self.draft_beta, d.draft_coeffs.beta, &path("draft_beta"))?,
            },
        })
    }
}

impl From<&ProblemInstance> for InstanceFile {
    fn from(inst: &ProblemInstance) -> Self {
        InstanceFile {
            use_defaults: None,
            user_count: None,
            users: Some(
                inst.users
                    .iter()
                    .map(|u| UserFile {
                        prefix_len: Some(u.prefix_len),
                        accept_rate: Some(u.accept_rate),
                        comm_latency_ms: Some(u.comm_latency_ms),
                        draft_c: Some(u.draft_coeffs.c),
                        draft_beta: Some(u.draft_coeffs.beta),
                    })
                    .collect(),
            ),
            draft_model: Some(inst.draft_dims),
            verify_model: Some(inst.verify_dims),
            verify_c: Some(inst.verify_coeffs.c),
            verify_beta: Some(inst.verify_coeffs.beta),
            mem_cap_bytes: Some(inst.mem_cap_bytes.into()),
            bounds: Some(BoundsFile {
                l_ub: Some(inst.bounds.l_ub),
                i_ub: Some(inst.bounds.i_ub),
                t_ub: Some(inst.bounds.t_ub),
                s_ub: Some(inst.bounds.s_ub),
            }),
        }
    }
}
