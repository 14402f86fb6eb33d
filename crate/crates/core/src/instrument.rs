//! Module validation and the export rewrite that makes instance state
//! reachable from the host.
//!
//! Snapshotting needs every mutable global (notably the shadow stack pointer
//! LLVM keeps in a non-exported global) and linear memory, so the module is
//! rewritten to export them as `__wop_global_{index}` and `__wop_memory`.
//! Everything but the export section is copied byte for byte.

use thiserror::Error;
use wasm_encoder::{ExportKind, ExportSection, RawSection};
use wasm_operator_abi::names;
use wasmparser::types::EntityType;
use wasmparser::{ExternalKind, Parser, Payload, TypeRef, ValType, Validator};

pub const MEMORY_EXPORT: &str = "__wop_memory";
pub const GLOBAL_EXPORT_PREFIX: &str = "__wop_global_";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("invalid module: {0}")]
    Invalid(String),
    #[error("missing export `{0}`")]
    MissingExport(&'static str),
    #[error("export `{name}` has signature {found}, expected {expected}")]
    ExportSignature { name: &'static str, expected: String, found: String },
    #[error("unknown import `{module}::{name}`")]
    UnknownImport { module: String, name: String },
    #[error("import `{module}::{name}` has signature {found}, expected {expected}")]
    ImportSignature { module: String, name: String, expected: String, found: String },
    #[error("module must define exactly one linear memory")]
    Memory,
    #[error("mutable global {index} of type {ty} cannot be snapshotted")]
    UnsupportedGlobal { index: u32, ty: String },
}

impl ValidationError {
    /// The offending symbol, when there is one.
    pub fn symbol(&self) -> Option<String> {
        match self {
            ValidationError::MissingExport(n) | ValidationError::ExportSignature { name: n, .. } => {
                Some((*n).to_owned())
            }
            ValidationError::UnknownImport { module, name } | ValidationError::ImportSignature { module, name, .. } => {
                Some(format!("{module}::{name}"))
            }
            _ => None,
        }
    }
}

/// Result of validating and rewriting a guest module.
#[derive(Debug, Clone)]
pub struct Instrumented {
    pub bytes: Vec<u8>,
    /// Indices of the mutable globals exported for snapshotting.
    pub mutable_globals: Vec<u32>,
    pub has_config: bool,
}

const I32: ValType = ValType::I32;
const I64: ValType = ValType::I64;

type Sig = (&'static [ValType], &'static [ValType]);

const REQUIRED_EXPORTS: &[(&str, Sig)] = &[
    (names::EXPORT_START, (&[], &[])),
    (names::EXPORT_ALLOCATE, (&[I32], &[I32])),
    (names::EXPORT_WAKEUP, (&[I64, I32, I32], &[])),
];

const CONFIG_SIG: Sig = (&[I32, I32], &[]);

const HOST_IMPORTS: &[(&str, Sig)] = &[
    (names::IMPORT_KUBE_REQUEST, (&[I32, I32], &[I64])),
    (names::IMPORT_DELAY, (&[I64], &[I64])),
    (names::IMPORT_LOG, (&[I32, I32], &[])),
];

/// Signatures of the supported WASI preview1 functions.
pub(crate) const WASI_IMPORTS: &[(&str, Sig)] = &[
    ("fd_write", (&[I32, I32, I32, I32], &[I32])),
    ("proc_exit", (&[I32], &[])),
    ("random_get", (&[I32, I32], &[I32])),
    ("clock_time_get", (&[I32, I64, I32], &[I32])),
    ("environ_sizes_get", (&[I32, I32], &[I32])),
    ("environ_get", (&[I32, I32], &[I32])),
    ("args_sizes_get", (&[I32, I32], &[I32])),
    ("args_get", (&[I32, I32], &[I32])),
    ("sched_yield", (&[], &[I32])),
];

fn fmt_sig(params: &[ValType], results: &[ValType]) -> String {
    let list = |v: &[ValType]| v.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(", ");
    format!("({}) -> ({})", list(params), list(results))
}

fn matches(sig: Sig, params: &[ValType], results: &[ValType]) -> bool {
    sig.0 == params && sig.1 == results
}

pub fn validate_and_instrument(bytes: &[u8]) -> Result<Instrumented, ValidationError> {
    let types = Validator::new().validate_all(bytes).map_err(|e| ValidationError::Invalid(e.to_string()))?;
    let types = types.as_ref();
    let func_sig = |ty: EntityType| match ty {
        EntityType::Func(id) | EntityType::FuncExact(id) => {
            let f = types[id].unwrap_func();
            Some((f.params().to_vec(), f.results().to_vec()))
        }
        _ => None,
    };

    for (module, name, ty) in types.core_imports().into_iter().flatten() {
        let table = match module {
            names::HOST_MODULE => HOST_IMPORTS,
            names::WASI_MODULE => WASI_IMPORTS,
            _ => &[],
        };
        let unknown = || ValidationError::UnknownImport { module: module.to_owned(), name: name.to_owned() };
        let &(_, sig) = table.iter().find(|(n, _)| *n == name).ok_or_else(unknown)?;
        let (params, results) = func_sig(ty).ok_or_else(unknown)?;
        if !matches(sig, &params, &results) {
            return Err(ValidationError::ImportSignature {
                module: module.to_owned(),
                name: name.to_owned(),
                expected: fmt_sig(sig.0, sig.1),
                found: fmt_sig(&params, &results),
            });
        }
    }

    let exports: Vec<(&str, EntityType)> = types.core_exports().into_iter().flatten().collect();
    let export = |name: &str| exports.iter().find(|(n, _)| *n == name).map(|(_, t)| *t);
    let check_export = |name: &'static str, sig: Sig| -> Result<bool, ValidationError> {
        let Some(ty) = export(name) else { return Ok(false) };
        let wrong = |found: String| ValidationError::ExportSignature { name, expected: fmt_sig(sig.0, sig.1), found };
        let (params, results) = func_sig(ty).ok_or_else(|| wrong("a non-function".into()))?;
        if !matches(sig, &params, &results) {
            return Err(wrong(fmt_sig(&params, &results)));
        }
        Ok(true)
    };
    for &(name, sig) in REQUIRED_EXPORTS {
        if !check_export(name, sig)? {
            return Err(ValidationError::MissingExport(name));
        }
    }
    let has_config = check_export(names::EXPORT_CONFIG, CONFIG_SIG)?;

    if types.memory_count() != 1 {
        return Err(ValidationError::Memory);
    }

    // Imports are functions only (checked above), so global and memory
    // index spaces hold defined entities exclusively.
    let mut mutable_globals = Vec::new();
    for index in 0..types.global_count() {
        let g = types.global_at(index);
        if !g.mutable {
            continue;
        }
        match g.content_type {
            ValType::I32 | ValType::I64 | ValType::F32 | ValType::F64 => mutable_globals.push(index),
            other => return Err(ValidationError::UnsupportedGlobal { index, ty: other.to_string() }),
        }
    }

    let bytes = rewrite_exports(bytes, &mutable_globals)?;
    Ok(Instrumented { bytes, mutable_globals, has_config })
}

fn rewrite_exports(bytes: &[u8], mutable_globals: &[u32]) -> Result<Vec<u8>, ValidationError> {
    let invalid = |e: wasmparser::BinaryReaderError| ValidationError::Invalid(e.to_string());
    let mut module = wasm_encoder::Module::new();
    for payload in Parser::new(0).parse_all(bytes) {
        let payload = payload.map_err(invalid)?;
        match &payload {
            Payload::ExportSection(reader) => {
                let mut section = ExportSection::new();
                for export in reader.clone() {
                    let e = export.map_err(invalid)?;
                    let kind = match e.kind {
                        ExternalKind::Func | ExternalKind::FuncExact => ExportKind::Func,
                        ExternalKind::Table => ExportKind::Table,
                        ExternalKind::Memory => ExportKind::Memory,
                        ExternalKind::Global => ExportKind::Global,
                        ExternalKind::Tag => ExportKind::Tag,
                    };
                    section.export(e.name, kind, e.index);
                }
                section.export(MEMORY_EXPORT, ExportKind::Memory, 0);
                for &g in mutable_globals {
                    section.export(&format!("{GLOBAL_EXPORT_PREFIX}{g}"), ExportKind::Global, g);
                }
                module.section(&section);
            }
            Payload::ImportSection(reader) => {
                // Defensive: validation already restricted imports to functions.
                for import in reader.clone().into_imports() {
                    if !matches!(import.map_err(invalid)?.ty, TypeRef::Func(_) | TypeRef::FuncExact(_)) {
                        return Err(ValidationError::Invalid("only function imports are supported".into()));
                    }
                }
                copy_raw(&mut module, &payload, bytes);
            }
            _ => copy_raw(&mut module, &payload, bytes),
        }
    }
    Ok(module.finish())
}

fn copy_raw(module: &mut wasm_encoder::Module, payload: &Payload<'_>, bytes: &[u8]) {
    if let Some((id, range)) = payload.as_section() {
        let data = &bytes[range.start as usize..range.end as usize];
        module.section(&RawSection { id, data });
    }
}
