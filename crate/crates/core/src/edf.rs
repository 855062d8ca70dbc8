//! Environment Definition Files.
//!
//! An EDF is a small TOML document describing the runtime environment of a
//! workload: image, bind mounts, working directory, entrypoint behaviour,
//! CDI devices, environment variables and annotations. This module parses
//! the document, expands `$NAME` / `${NAME}` references against a host
//! environment, validates the result and separates the reserved
//! `com.sarus.*` control-plane annotations from the ones forwarded to the
//! engine.

use std::collections::BTreeMap;
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::Value;

use crate::digest::Digest;

/// Annotation namespace consumed by the control plane and never forwarded.
pub const RESERVED_PREFIX: &str = "com.sarus.";

pub const KEY_PARALLAX_STORE: &str = "com.sarus.parallax.store";
pub const KEY_ENGINE_MODULE: &str = "com.sarus.engine.module";
pub const KEY_TMPDIR: &str = "com.sarus.storage.tmpdir";
pub const FEATURE_PREFIX: &str = "com.sarus.feature.";

/// Job environment variable carrying the canonical serialized EDF.
pub const JOB_ENV_EDF: &str = "HPCC_EDF";
/// Job environment variable carrying the digest of [`JOB_ENV_EDF`].
pub const JOB_ENV_EDF_DIGEST: &str = "HPCC_EDF_SHA256";

const TOP_LEVEL_KEYS: [&str; 8] = [
    "image",
    "mounts",
    "workdir",
    "entrypoint",
    "writable",
    "devices",
    "env",
    "annotations",
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EdfError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown top-level key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}` expects {expected}, found {found}")]
    WrongKind {
        key: String,
        expected: &'static str,
        found: &'static str,
    },
    #[error("duplicate key `{0}`")]
    DuplicateKey(String),
    #[error("invalid mount `{value}`: {reason}")]
    InvalidMount { value: String, reason: &'static str },
    #[error("undefined variable `{name}` referenced in {field}")]
    UndefinedVariable { name: String, field: String },
    #[error("malformed variable reference in {field}: {reason}")]
    MalformedVariable { field: String, reason: &'static str },
    #[error("unrecognized reserved annotation `{0}`")]
    UnknownReservedAnnotation(String),
    #[error("reserved annotation `{key}` has invalid value `{value}`")]
    InvalidReservedValue { key: String, value: String },
    #[error("environment definition rejected:\n{0}")]
    Invalid(ValidationReport),
    #[error("job environment is missing `{0}`")]
    MissingJobEnv(&'static str),
    #[error("serialized environment digest mismatch: expected {expected}, computed {actual}")]
    JobEnvDigestMismatch { expected: String, actual: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MountSpec {
    pub source: String,
    pub destination: String,
    pub read_only: bool,
}

impl MountSpec {
    pub fn new(source: impl Into<String>, destination: impl Into<String>, read_only: bool) -> Self {
        MountSpec {
            source: source.into(),
            destination: destination.into(),
            read_only,
        }
    }

    /// Parses `src:dst[:ro|rw]`.
    pub fn parse(value: &str) -> Result<Self, EdfError> {
        let err = |reason| EdfError::InvalidMount {
            value: value.to_string(),
            reason,
        };
        let parts: Vec<&str> = value.split(':').collect();
        let read_only = match parts.len() {
            2 => false,
            3 => match parts[2] {
                "ro" => true,
                "rw" => false,
                _ => return Err(err("flag must be `ro` or `rw`")),
            },
            _ => return Err(err("expected `source:destination[:ro|rw]`")),
        };
        if parts[0].is_empty() || parts[1].is_empty() {
            return Err(err("empty source or destination"));
        }
        Ok(MountSpec::new(parts[0], parts[1], read_only))
    }
}

impl fmt::Display for MountSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.source, self.destination)?;
        if self.read_only {
            f.write_str(":ro")?;
        }
        Ok(())
    }
}

/// A parsed environment definition.
///
/// `IndexMap` keeps `env` and `annotations` in document order; equality is
/// order-insensitive, which is what round-trip comparisons want.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edf {
    pub image: String,
    pub mounts: Vec<MountSpec>,
    pub workdir: Option<String>,
    /// `false` overrides the image entrypoint with an empty one.
    pub entrypoint: bool,
    pub writable: bool,
    pub devices: Vec<String>,
    pub env: IndexMap<String, String>,
    pub annotations: IndexMap<String, String>,
}

impl Default for Edf {
    fn default() -> Self {
        Edf {
            image: String::new(),
            mounts: Vec::new(),
            workdir: None,
            entrypoint: true,
            writable: true,
            devices: Vec::new(),
            env: IndexMap::new(),
            annotations: IndexMap::new(),
        }
    }
}

fn kind_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(text.len());
    let before = &text[..offset];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

fn expect_string(key: &str, v: &Value) -> Result<String, EdfError> {
    match v {
        Value::String(s) => Ok(s.clone()),
        other => Err(EdfError::WrongKind {
            key: key.to_string(),
            expected: "string",
            found: kind_name(other),
        }),
    }
}

fn expect_bool(key: &str, v: &Value) -> Result<bool, EdfError> {
    match v {
        Value::Boolean(b) => Ok(*b),
        other => Err(EdfError::WrongKind {
            key: key.to_string(),
            expected: "boolean",
            found: kind_name(other),
        }),
    }
}

fn expect_string_array(key: &str, v: &Value) -> Result<Vec<String>, EdfError> {
    match v {
        Value::Array(items) => items
            .iter()
            .map(|item| match item {
                Value::String(s) => Ok(s.clone()),
                other => Err(EdfError::WrongKind {
                    key: key.to_string(),
                    expected: "array of strings",
                    found: kind_name(other),
                }),
            })
            .collect(),
        other => Err(EdfError::WrongKind {
            key: key.to_string(),
            expected: "array of strings",
            found: kind_name(other),
        }),
    }
}

/// Dotted TOML keys nest tables; annotations are flat dotted strings.
fn flatten_annotations(
    prefix: &str,
    table: &toml::Table,
    out: &mut IndexMap<String, String>,
) -> Result<(), EdfError> {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(inner) => flatten_annotations(&key, inner, out)?,
            Value::String(s) => {
                if out.insert(key.clone(), s.clone()).is_some() {
                    return Err(EdfError::DuplicateKey(format!("annotations.{key}")));
                }
            }
            other => {
                return Err(EdfError::WrongKind {
                    key: format!("annotations.{key}"),
                    expected: "string",
                    found: kind_name(other),
                })
            }
        }
    }
    Ok(())
}

/// Parses EDF text. Absent keys take their defaults.
pub fn parse_edf(text: &str) -> Result<Edf, EdfError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
        let (line, column) = e
            .span()
            .map_or((1, 1), |span| line_column(text, span.start));
        EdfError::Syntax {
            line,
            column,
            message: e.message().to_string(),
        }
    })?;

    if let Some(unknown) = table.keys().find(|k| !TOP_LEVEL_KEYS.contains(&k.as_str())) {
        return Err(EdfError::UnknownKey(unknown.clone()));
    }

    let mut edf = Edf::default();
    if let Some(v) = table.get("image") {
        edf.image = expect_string("image", v)?;
    }
    if let Some(v) = table.get("mounts") {
        edf.mounts = expect_string_array("mounts", v)?
            .iter()
            .map(|m| MountSpec::parse(m))
            .collect::<Result<_, _>>()?;
    }
    if let Some(v) = table.get("workdir") {
        edf.workdir = Some(expect_string("workdir", v)?);
    }
    if let Some(v) = table.get("entrypoint") {
        edf.entrypoint = expect_bool("entrypoint", v)?;
    }
    if let Some(v) = table.get("writable") {
        edf.writable = expect_bool("writable", v)?;
    }
    if let Some(v) = table.get("devices") {
        edf.devices = expect_string_array("devices", v)?;
    }
    if let Some(v) = table.get("env") {
        let Value::Table(env) = v else {
            return Err(EdfError::WrongKind {
                key: "env".into(),
                expected: "table",
                found: kind_name(v),
            });
        };
        for (k, v) in env {
            let value = expect_string(&format!("env.{k}"), v)?;
            edf.env.insert(k.clone(), value);
        }
    }
    if let Some(v) = table.get("annotations") {
        let Value::Table(ann) = v else {
            return Err(EdfError::WrongKind {
                key: "annotations".into(),
                expected: "table",
                found: kind_name(v),
            });
        };
        flatten_annotations("", ann, &mut edf.annotations)?;
    }
    Ok(edf)
}

fn toml_string(s: &str) -> String {
    Value::String(s.to_string()).to_string()
}

fn is_bare_key(k: &str) -> bool {
    !k.is_empty()
        && k.bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

fn toml_string_array(items: impl Iterator<Item = String>) -> String {
    let items: Vec<String> = items.map(|s| toml_string(&s)).collect();
    format!("[{}]", items.join(", "))
}

/// Canonical serialization: keys in a fixed order, annotation keys quoted.
pub fn serialize_edf(edf: &Edf) -> String {
    let mut out = String::new();
    out.push_str(&format!("image = {}\n", toml_string(&edf.image)));
    out.push_str(&format!(
        "mounts = {}\n",
        toml_string_array(edf.mounts.iter().map(|m| m.to_string()))
    ));
    if let Some(w) = &edf.workdir {
        out.push_str(&format!("workdir = {}\n", toml_string(w)));
    }
    out.push_str(&format!("entrypoint = {}\n", edf.entrypoint));
    out.push_str(&format!("writable = {}\n", edf.writable));
    out.push_str(&format!(
        "devices = {}\n",
        toml_string_array(edf.devices.iter().cloned())
    ));
    if !edf.env.is_empty() {
        out.push_str("\n[env]\n");
        for (k, v) in &edf.env {
            let key = if is_bare_key(k) {
                k.clone()
            } else {
                toml_string(k)
            };
            out.push_str(&format!("{key} = {}\n", toml_string(v)));
        }
    }
    if !edf.annotations.is_empty() {
        out.push_str("\n[annotations]\n");
        for (k, v) in &edf.annotations {
            out.push_str(&format!("{} = {}\n", toml_string(k), toml_string(v)));
        }
    }
    out
}

pub(crate) fn is_posix_name(name: &str) -> bool {
    let mut bytes = name.bytes();
    matches!(bytes.next(), Some(b) if b.is_ascii_alphabetic() || b == b'_')
        && bytes.all(|b| b.is_ascii_alphanumeric() || b == b'_')
}

/// Single-pass `$NAME` / `${NAME}` / `$$` expansion of one value.
pub fn expand_str(
    input: &str,
    host_env: &BTreeMap<String, String>,
    field: &str,
) -> Result<String, EdfError> {
    let mut out = String::with_capacity(input.len());
    let mut chars = input.char_indices().peekable();
    while let Some((_, c)) = chars.next() {
        if c != '$' {
            out.push(c);
            continue;
        }
        let name = match chars.peek().copied() {
            Some((_, '$')) => {
                chars.next();
                out.push('$');
                continue;
            }
            Some((start, '{')) => {
                chars.next();
                let rest = &input[start + 1..];
                let Some(end) = rest.find('}') else {
                    return Err(EdfError::MalformedVariable {
                        field: field.to_string(),
                        reason: "`${` without closing brace",
                    });
                };
                let name = &rest[..end];
                if !is_posix_name(name) {
                    return Err(EdfError::MalformedVariable {
                        field: field.to_string(),
                        reason: "invalid variable name inside `${}`",
                    });
                }
                for _ in 0..=name.chars().count() {
                    chars.next();
                }
                name
            }
            Some((start, c)) if c.is_ascii_alphabetic() || c == '_' => {
                let len = input[start..]
                    .bytes()
                    .take_while(|b| b.is_ascii_alphanumeric() || *b == b'_')
                    .count();
                for _ in 0..len {
                    chars.next();
                }
                &input[start..start + len]
            }
            // A lone `$` is literal.
            _ => {
                out.push('$');
                continue;
            }
        };
        match host_env.get(name) {
            Some(value) => out.push_str(value),
            None => {
                return Err(EdfError::UndefinedVariable {
                    name: name.to_string(),
                    field: field.to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Expands variables in image, mount paths, workdir, env values and
/// annotation values. Keys are never expanded.
pub fn expand_variables(edf: &Edf, host_env: &BTreeMap<String, String>) -> Result<Edf, EdfError> {
    let mut out = edf.clone();
    out.image = expand_str(&edf.image, host_env, "image")?;
    for (i, m) in out.mounts.iter_mut().enumerate() {
        m.source = expand_str(&m.source, host_env, &format!("mounts[{i}].source"))?;
        m.destination = expand_str(
            &m.destination,
            host_env,
            &format!("mounts[{i}].destination"),
        )?;
    }
    if let Some(w) = &edf.workdir {
        out.workdir = Some(expand_str(w, host_env, "workdir")?);
    }
    for (k, v) in out.env.iter_mut() {
        *v = expand_str(v, host_env, &format!("env.{k}"))?;
    }
    for (k, v) in out.annotations.iter_mut() {
        *v = expand_str(v, host_env, &format!("annotations.{k}"))?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub errors: Vec<Issue>,
    pub warnings: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }

    fn error(&mut self, field: impl Into<String>, message: impl Into<String>) {
        self.errors.push(Issue {
            field: field.into(),
            message: message.into(),
        });
    }

    fn warn(&mut self, field: impl Into<String>, message: impl Into<String>) {
        self.warnings.push(Issue {
            field: field.into(),
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.errors {
            writeln!(f, "error: {}: {}", e.field, e.message)?;
        }
        for w in &self.warnings {
            writeln!(f, "warning: {}: {}", w.field, w.message)?;
        }
        Ok(())
    }
}

/// `vendor/class=name`, e.g. `nvidia.com/gpu=all`.
pub fn parse_device_name(name: &str) -> Option<(&str, &str, &str)> {
    let (kind, device) = name.split_once('=')?;
    let (vendor, class) = kind.split_once('/')?;
    let vendor_ok = !vendor.is_empty()
        && vendor
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'.' || b == b'-' || b == b'_');
    let class_ok = !class.is_empty()
        && class
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_');
    let device_ok = !device.is_empty()
        && device
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b"._:-".contains(&b));
    (vendor_ok && class_ok && device_ok).then_some((vendor, class, device))
}

fn is_annotation_key(key: &str) -> bool {
    key.split('.').all(|seg| {
        !seg.is_empty()
            && seg
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
    })
}

fn has_unexpanded_reference(s: &str) -> bool {
    s.as_bytes()
        .windows(2)
        .any(|w| w[0] == b'$' && (w[1] == b'{' || w[1] == b'_' || w[1].is_ascii_alphabetic()))
}

/// Checks every `Edf` invariant; violations are data, never errors.
pub fn validate_edf(edf: &Edf) -> ValidationReport {
    let mut report = ValidationReport::default();

    if edf.image.trim().is_empty() {
        report.error("image", "image reference is empty");
    } else if edf.image.chars().any(char::is_whitespace) {
        report.error("image", "image reference contains whitespace");
    }

    let mut seen_dest: Vec<&str> = Vec::new();
    for (i, m) in edf.mounts.iter().enumerate() {
        let field = format!("mounts[{i}]");
        if m.source.is_empty() {
            report.error(&field, "mount source is empty");
        } else if !m.source.starts_with('/') {
            report.warn(&field, format!("mount source `{}` is relative", m.source));
        }
        if !m.destination.starts_with('/') {
            report.error(
                &field,
                format!("mount destination `{}` is not absolute", m.destination),
            );
        }
        for path in [&m.source, &m.destination] {
            if path.contains([',', ':', '\n']) {
                report.error(
                    &field,
                    format!("mount path `{path}` contains `,`, `:` or a line break"),
                );
            }
        }
        if seen_dest.contains(&m.destination.as_str()) {
            report.error(
                &field,
                format!("duplicate mount destination `{}`", m.destination),
            );
        } else {
            seen_dest.push(&m.destination);
        }
    }

    if let Some(w) = &edf.workdir {
        if !w.starts_with('/') {
            report.error("workdir", format!("workdir `{w}` is not absolute"));
        }
    }

    let mut seen_dev: Vec<&str> = Vec::new();
    for (i, d) in edf.devices.iter().enumerate() {
        let field = format!("devices[{i}]");
        if parse_device_name(d).is_none() {
            report.error(&field, format!("`{d}` is not a `vendor/class=name` device"));
        }
        if seen_dev.contains(&d.as_str()) {
            report.warn(&field, format!("device `{d}` requested twice"));
        } else {
            seen_dev.push(d);
        }
    }

    for (k, v) in &edf.env {
        if !is_posix_name(k) {
            report.error(format!("env.{k}"), "not a valid environment variable name");
        }
        if v.contains('\n') {
            report.error(format!("env.{k}"), "value contains a line break");
        }
    }

    for (k, v) in &edf.annotations {
        if !is_annotation_key(k) {
            report.error(
                format!("annotations.{k}"),
                "annotation keys are dot-separated identifiers",
            );
        }
        if v.contains('\n') {
            report.error(format!("annotations.{k}"), "value contains a line break");
        }
    }

    let mut literal_dollar = |field: String, s: &str| {
        if has_unexpanded_reference(s) {
            report.warn(field, "value still contains a `$` reference");
        }
    };
    literal_dollar("image".into(), &edf.image);
    if let Some(w) = &edf.workdir {
        literal_dollar("workdir".into(), w);
    }
    for (k, v) in &edf.env {
        literal_dollar(format!("env.{k}"), v);
    }

    report
}

/// Settings taken from reserved `com.sarus.*` annotations.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlPlaneSettings {
    pub parallax_store: Option<String>,
    pub engine_module: Option<String>,
    pub tmpdir: Option<String>,
    pub features: BTreeMap<String, bool>,
}

/// Partitions annotations into control-plane settings and the forwarded rest.
pub fn split_annotations(
    edf: &Edf,
) -> Result<(ControlPlaneSettings, IndexMap<String, String>), EdfError> {
    let mut settings = ControlPlaneSettings::default();
    let mut forwarded = IndexMap::new();
    for (k, v) in &edf.annotations {
        if !k.starts_with(RESERVED_PREFIX) {
            forwarded.insert(k.clone(), v.clone());
            continue;
        }
        let invalid = || EdfError::InvalidReservedValue {
            key: k.clone(),
            value: v.clone(),
        };
        match k.as_str() {
            KEY_PARALLAX_STORE => {
                if !v.starts_with('/') {
                    return Err(invalid());
                }
                settings.parallax_store = Some(v.clone());
            }
            KEY_TMPDIR => {
                if !v.starts_with('/') {
                    return Err(invalid());
                }
                settings.tmpdir = Some(v.clone());
            }
            KEY_ENGINE_MODULE => {
                if v.is_empty() {
                    return Err(invalid());
                }
                settings.engine_module = Some(v.clone());
            }
            _ => {
                let Some(feature) = k.strip_prefix(FEATURE_PREFIX) else {
                    return Err(EdfError::UnknownReservedAnnotation(k.clone()));
                };
                if feature.is_empty() || feature.contains('.') {
                    return Err(EdfError::UnknownReservedAnnotation(k.clone()));
                }
                let on = match v.as_str() {
                    "true" => true,
                    "false" => false,
                    _ => return Err(invalid()),
                };
                settings.features.insert(feature.to_string(), on);
            }
        }
    }
    Ok((settings, forwarded))
}

/// An EDF that passed validation, with its reserved annotations split off.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidatedEdf {
    edf: Edf,
    settings: ControlPlaneSettings,
    forwarded: IndexMap<String, String>,
    warnings: Vec<Issue>,
}

impl ValidatedEdf {
    pub fn new(edf: Edf) -> Result<Self, EdfError> {
        let report = validate_edf(&edf);
        if !report.is_ok() {
            return Err(EdfError::Invalid(report));
        }
        let (settings, forwarded) = split_annotations(&edf)?;
        Ok(ValidatedEdf {
            edf,
            settings,
            forwarded,
            warnings: report.warnings,
        })
    }

    /// parse → expand → validate → split.
    pub fn load(text: &str, host_env: &BTreeMap<String, String>) -> Result<Self, EdfError> {
        let parsed = parse_edf(text)?;
        Self::new(expand_variables(&parsed, host_env)?)
    }

    pub fn edf(&self) -> &Edf {
        &self.edf
    }

    pub fn settings(&self) -> &ControlPlaneSettings {
        &self.settings
    }

    /// Non-reserved annotations, in document order.
    pub fn forwarded_annotations(&self) -> &IndexMap<String, String> {
        &self.forwarded
    }

    pub fn warnings(&self) -> &[Issue] {
        &self.warnings
    }

    pub fn into_edf(self) -> Edf {
        self.edf
    }
}

/// Serializes an expanded EDF into job environment variables.
pub fn to_job_env(edf: &Edf) -> Vec<(String, String)> {
    let text = serialize_edf(edf);
    let digest = Digest::of(text.as_bytes());
    vec![
        (JOB_ENV_EDF.to_string(), text),
        (JOB_ENV_EDF_DIGEST.to_string(), digest.to_string()),
    ]
}

/// Rebuilds the EDF from the job environment, checking its digest. No
/// variable expansion happens here: the serialized form is already expanded.
pub fn from_job_env(env: &BTreeMap<String, String>) -> Result<ValidatedEdf, EdfError> {
    let text = env
        .get(JOB_ENV_EDF)
        .ok_or(EdfError::MissingJobEnv(JOB_ENV_EDF))?;
    let expected = env
        .get(JOB_ENV_EDF_DIGEST)
        .ok_or(EdfError::MissingJobEnv(JOB_ENV_EDF_DIGEST))?;
    let actual = Digest::of(text.as_bytes());
    if actual.as_str() != expected {
        return Err(EdfError::JobEnvDigestMismatch {
            expected: expected.clone(),
            actual: actual.to_string(),
        });
    }
    ValidatedEdf::new(parse_edf(text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const LISTING: &str = r#"image = "ghcr.io/cscs/ml-workflows/transformers:latest-arm64"

mounts = [
  "/scratch/$USER/hf-models:/opt/hf",
  "/scratch/$USER/data:/data",
  "/scratch/$USER/output:/output"
]

workdir = "/scratch/$USER"
entrypoint = false

devices = ["nvidia.com/gpu=all"]

[env]
HUGGINGFACE_HUB_CACHE = "/opt/hf/hub"
TRANSFORMERS_CACHE    = "/opt/hf/transformers"

[annotations]
com.hooks.cxi.enabled             = "true"
com.hooks.aws_ofi_nccl.enabled    = "true"
com.hooks.aws_ofi_nccl.variant    = "cuda12"
com.hooks.nvidia_cuda_mps.enabled = "true"
"#;

    fn alice() -> BTreeMap<String, String> {
        BTreeMap::from([("USER".to_string(), "alice".to_string())])
    }

    #[test]
    fn parses_full_document() {
        let edf = parse_edf(LISTING).unwrap();
        assert_eq!(
            edf.image,
            "ghcr.io/cscs/ml-workflows/transformers:latest-arm64"
        );
        assert_eq!(edf.mounts.len(), 3);
        assert_eq!(
            edf.mounts[0],
            MountSpec::new("/scratch/$USER/hf-models", "/opt/hf", false)
        );
        assert_eq!(edf.workdir.as_deref(), Some("/scratch/$USER"));
        assert!(!edf.entrypoint);
        assert!(edf.writable);
        assert_eq!(edf.devices, vec!["nvidia.com/gpu=all"]);
        assert_eq!(edf.env.len(), 2);
        assert_eq!(
            edf.annotations.keys().collect::<Vec<_>>(),
            vec![
                "com.hooks.cxi.enabled",
                "com.hooks.aws_ofi_nccl.enabled",
                "com.hooks.aws_ofi_nccl.variant",
                "com.hooks.nvidia_cuda_mps.enabled"
            ]
        );
        assert_eq!(edf.annotations["com.hooks.cxi.enabled"], "true");
    }

    #[test]
    fn minimal_document_takes_defaults() {
        let edf = parse_edf("image = \"alpine\"").unwrap();
        assert_eq!(
            edf,
            Edf {
                image: "alpine".into(),
                ..Edf::default()
            }
        );
    }

    #[test]
    fn string_entrypoint_is_wrong_kind() {
        let err = parse_edf("image = \"a\"\nentrypoint = \"false\"").unwrap_err();
        assert_eq!(
            err,
            EdfError::WrongKind {
                key: "entrypoint".into(),
                expected: "boolean",
                found: "string"
            }
        );
    }

    #[test]
    fn boolean_annotation_is_wrong_kind() {
        let err = parse_edf("image = \"a\"\n[annotations]\na.b = true\n").unwrap_err();
        assert!(matches!(err, EdfError::WrongKind { ref key, .. } if key == "annotations.a.b"));
    }

    #[test]
    fn unknown_key_and_duplicates() {
        assert_eq!(
            parse_edf("image = \"a\"\ncommand = \"x\"").unwrap_err(),
            EdfError::UnknownKey("command".into())
        );
        assert!(matches!(
            parse_edf("image = \"a\"\nimage = \"b\"").unwrap_err(),
            EdfError::Syntax { line: 2, .. }
        ));
        assert_eq!(
            parse_edf("image = \"a\"\n[annotations]\n\"x.y\" = \"1\"\nx.y = \"2\"\n").unwrap_err(),
            EdfError::DuplicateKey("annotations.x.y".into())
        );
    }

    #[test]
    fn syntax_error_reports_position() {
        let err = parse_edf("image = \"a\"\nmounts = [\n  \"x:/y\",\n  oops\n]\n").unwrap_err();
        let EdfError::Syntax { line, column, .. } = err else {
            panic!("expected syntax error, got {err:?}");
        };
        assert_eq!((line, column), (4, 3));
    }

    #[test]
    fn mount_grammar() {
        assert_eq!(
            MountSpec::parse("/a:/b:ro").unwrap(),
            MountSpec::new("/a", "/b", true)
        );
        assert_eq!(
            MountSpec::parse("/a:/b:rw").unwrap(),
            MountSpec::new("/a", "/b", false)
        );
        assert!(MountSpec::parse("/a").is_err());
        assert!(MountSpec::parse("/a:/b:rx").is_err());
        assert!(MountSpec::parse(":/b").is_err());
    }

    #[test]
    fn expands_listing_mounts() {
        let edf = parse_edf("image = \"x\"\nmounts = [\"/scratch/$USER/data:/data\"]").unwrap();
        let out = expand_variables(&edf, &alice()).unwrap();
        assert_eq!(out.mounts[0].to_string(), "/scratch/alice/data:/data");
    }

    #[test]
    fn expansion_identity_without_references() {
        let edf = parse_edf("image = \"x\"\nworkdir = \"/w\"\n[env]\nA = \"b\"").unwrap();
        assert_eq!(expand_variables(&edf, &BTreeMap::new()).unwrap(), edf);
    }

    #[test]
    fn undefined_variable_is_named() {
        let edf = parse_edf("image = \"x\"\nworkdir = \"/w/$UNDEFINED\"").unwrap();
        assert_eq!(
            expand_variables(&edf, &alice()).unwrap_err(),
            EdfError::UndefinedVariable {
                name: "UNDEFINED".into(),
                field: "workdir".into()
            }
        );
    }

    #[test]
    fn expansion_forms() {
        let env = alice();
        assert_eq!(expand_str("${USER}x", &env, "f").unwrap(), "alicex");
        assert_eq!(
            expand_str("$USERx", &env, "f").unwrap_err(),
            EdfError::UndefinedVariable {
                name: "USERx".into(),
                field: "f".into()
            }
        );
        assert_eq!(expand_str("$$USER", &env, "f").unwrap(), "$USER");
        assert_eq!(expand_str("cost $5 $", &env, "f").unwrap(), "cost $5 $");
        assert!(matches!(
            expand_str("${USER", &env, "f"),
            Err(EdfError::MalformedVariable { .. })
        ));
        assert!(matches!(
            expand_str("${1X}", &env, "f"),
            Err(EdfError::MalformedVariable { .. })
        ));
        // Values are not re-expanded.
        let env = BTreeMap::from([("A".to_string(), "$B".to_string())]);
        assert_eq!(expand_str("$A", &env, "f").unwrap(), "$B");
    }

    #[test]
    fn keys_are_not_expanded() {
        let edf = parse_edf("image = \"x\"\n[annotations]\n\"a.b\" = \"$USER\"").unwrap();
        let out = expand_variables(&edf, &alice()).unwrap();
        assert_eq!(out.annotations["a.b"], "alice");
    }

    #[test]
    fn listing_validates_clean() {
        let edf = expand_variables(&parse_edf(LISTING).unwrap(), &alice()).unwrap();
        let report = validate_edf(&edf);
        assert!(report.errors.is_empty(), "{report}");
    }

    #[test]
    fn duplicate_destination_is_one_error() {
        let edf = parse_edf("image = \"x\"\nmounts = [\"/a:/data\", \"/b:/data\"]").unwrap();
        let report = validate_edf(&edf);
        assert_eq!(report.errors.len(), 1);
        assert!(report.errors[0].message.contains("duplicate"));
        assert_eq!(report.errors[0].field, "mounts[1]");
    }

    #[test]
    fn empty_image_is_one_error() {
        let report = validate_edf(&Edf::default());
        assert_eq!(report.errors.len(), 1);
        assert_eq!(report.errors[0].field, "image");
    }

    #[test]
    fn validation_catches_each_invariant() {
        let mut edf = Edf {
            image: "x".into(),
            ..Edf::default()
        };
        edf.mounts.push(MountSpec::new("/a", "rel", false));
        edf.workdir = Some("w".into());
        edf.devices.push("gpu".into());
        edf.env.insert("1BAD".into(), "v".into());
        edf.annotations.insert("a..b".into(), "v".into());
        let fields: Vec<_> = validate_edf(&edf)
            .errors
            .into_iter()
            .map(|i| i.field)
            .collect();
        assert_eq!(
            fields,
            vec![
                "mounts[0]",
                "workdir",
                "devices[0]",
                "env.1BAD",
                "annotations.a..b"
            ]
        );
    }

    #[test]
    fn listing_annotations_all_forwarded() {
        let edf = parse_edf(LISTING).unwrap();
        let (settings, forwarded) = split_annotations(&edf).unwrap();
        assert_eq!(settings, ControlPlaneSettings::default());
        assert_eq!(forwarded.len(), 4);
        assert_eq!(forwarded, edf.annotations);
    }

    #[test]
    fn reserved_annotations_are_consumed() {
        let mut edf = Edf::default();
        edf.annotations
            .insert(KEY_PARALLAX_STORE.into(), "/p".into());
        let (settings, forwarded) = split_annotations(&edf).unwrap();
        assert_eq!(settings.parallax_store.as_deref(), Some("/p"));
        assert!(forwarded.is_empty());

        let mut edf = Edf::default();
        edf.annotations
            .insert("com.sarus.feature.ssh".into(), "true".into());
        edf.annotations
            .insert(KEY_ENGINE_MODULE.into(), "hpc".into());
        edf.annotations.insert(KEY_TMPDIR.into(), "/dev/shm".into());
        let (settings, _) = split_annotations(&edf).unwrap();
        assert!(settings.features["ssh"]);
        assert_eq!(settings.engine_module.as_deref(), Some("hpc"));
        assert_eq!(settings.tmpdir.as_deref(), Some("/dev/shm"));
    }

    #[test]
    fn unknown_reserved_annotation_fails() {
        let mut edf = Edf::default();
        edf.annotations.insert("com.sarus.bogus".into(), "x".into());
        assert_eq!(
            split_annotations(&edf).unwrap_err(),
            EdfError::UnknownReservedAnnotation("com.sarus.bogus".into())
        );
        let mut edf = Edf::default();
        edf.annotations
            .insert("com.sarus.feature.x".into(), "yes".into());
        assert!(matches!(
            split_annotations(&edf),
            Err(EdfError::InvalidReservedValue { .. })
        ));
    }

    #[test]
    fn job_env_round_trip_and_tamper() {
        let v = ValidatedEdf::load(LISTING, &alice()).unwrap();
        let env: BTreeMap<_, _> = to_job_env(v.edf()).into_iter().collect();
        assert_eq!(from_job_env(&env).unwrap(), v);
        let mut bad = env.clone();
        bad.get_mut(JOB_ENV_EDF).unwrap().push(' ');
        assert!(matches!(
            from_job_env(&bad),
            Err(EdfError::JobEnvDigestMismatch { .. })
        ));
    }

    #[test]
    fn serialization_is_canonical() {
        let edf = parse_edf(LISTING).unwrap();
        let text = serialize_edf(&edf);
        assert_eq!(parse_edf(&text).unwrap(), edf);
        assert_eq!(serialize_edf(&parse_edf(&text).unwrap()), text);
    }
}
