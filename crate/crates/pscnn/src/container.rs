//! The compiled-container format: one uncompressed tar archive bundling the
//! program binaries, layer side tables, bank plans, and the macro /
//! weight-SRAM preload images, described by a JSON manifest.
//!
//! Members:
//!
//! * `manifest.json` — model structure, placements, side tables, bank
//!   plans, capacity statistics
//! * `program_fused.bin` — default instruction stream (little-endian words)
//! * `program_unfused.bin` — separate-pooling stream, when plannable
//! * `macro_image.bin` — 128 KiB macro preload (row-major, MSB = bitline 0)
//! * `wsram_image.bin` — 64 KiB weight-SRAM image, same row layout

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cim::{rows_from_image, rows_to_image, CimError, WORDLINES};
use crate::compiler::{MapStats, MappedModel, Placement, ProgramVariant};
use crate::isa::{program_from_bytes, program_to_bytes, IsaError};
use crate::mem::WSRAM_ROWS;
use crate::model::ValidatedModel;

pub const FORMAT: &str = "pscnn-container/1";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("container is missing member `{0}`")]
    MissingMember(&'static str),
    #[error("unsupported container format `{0}` (expected `{FORMAT}`)")]
    BadFormat(String),
    #[error(transparent)]
    Isa(#[from] IsaError),
    #[error(transparent)]
    Image(#[from] CimError),
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    model: ValidatedModel,
    placements: Vec<Placement>,
    stats: MapStats,
    fused: ProgramVariant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    unfused: Option<ProgramVariant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    unfused_error: Option<String>,
}

fn append(builder: &mut tar::Builder<impl Write>, name: &str, data: &[u8]) -> std::io::Result<()> {
    let mut header = tar::Header::new_ustar();
    header.set_path(name)?;
    header.set_size(data.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_cksum();
    builder.append(&header, data)
}

/// Serializes a mapped model into the container archive.
pub fn write_container(writer: impl Write, mapped: &MappedModel) -> Result<(), ContainerError> {
    let manifest = Manifest {
        format: FORMAT.to_string(),
        model: mapped.model.clone(),
        placements: mapped.placements.clone(),
        stats: mapped.stats,
        fused: mapped.fused.clone(),
        unfused: mapped.unfused.clone(),
        unfused_error: mapped.unfused_error.clone(),
    };
    let mut builder = tar::Builder::new(writer);
    append(
        &mut builder,
        "manifest.json",
        &serde_json::to_vec_pretty(&manifest)?,
    )?;
    append(
        &mut builder,
        "program_fused.bin",
        &program_to_bytes(&mapped.fused.program),
    )?;
    if let Some(unfused) = &mapped.unfused {
        append(
            &mut builder,
            "program_unfused.bin",
            &program_to_bytes(&unfused.program),
        )?;
    }
    append(
        &mut builder,
        "macro_image.bin",
        &rows_to_image(&mapped.macro_image),
    )?;
    append(
        &mut builder,
        "wsram_image.bin",
        &rows_to_image(&mapped.wsram_image),
    )?;
    builder.into_inner()?.flush()?;
    Ok(())
}

/// Reads a container back into a `MappedModel`.
pub fn read_container(reader: impl Read) -> Result<MappedModel, ContainerError> {
    let mut archive = tar::Archive::new(reader);
    let mut manifest_bytes = None;
    let mut fused_bytes = None;
    let mut unfused_bytes = None;
    let mut macro_bytes = None;
    let mut wsram_bytes = None;
    for entry in archive.entries()? {
        let mut entry = entry?;
        let name = entry.path()?.to_string_lossy().into_owned();
        let mut data = Vec::with_capacity(entry.size() as usize);
        entry.read_to_end(&mut data)?;
        match name.as_str() {
            "manifest.json" => manifest_bytes = Some(data),
            "program_fused.bin" => fused_bytes = Some(data),
            "program_unfused.bin" => unfused_bytes = Some(data),
            "macro_image.bin" => macro_bytes = Some(data),
            "wsram_image.bin" => wsram_bytes = Some(data),
            _ => {}
        }
    }
    let manifest: Manifest = serde_json::from_slice(
        &manifest_bytes.ok_or(ContainerError::MissingMember("manifest.json"))?,
    )?;
    if manifest.format != FORMAT {
        return Err(ContainerError::BadFormat(manifest.format));
    }

    let mut fused = manifest.fused;
    fused.program = program_from_bytes(
        &fused_bytes.ok_or(ContainerError::MissingMember("program_fused.bin"))?,
    )?;
    let unfused = match (manifest.unfused, unfused_bytes) {
        (Some(mut v), Some(bytes)) => {
            v.program = program_from_bytes(&bytes)?;
            Some(v)
        }
        (None, _) => None,
        (Some(_), None) => return Err(ContainerError::MissingMember("program_unfused.bin")),
    };

    Ok(MappedModel {
        model: manifest.model,
        placements: manifest.placements,
        macro_image: rows_from_image(
            &macro_bytes.ok_or(ContainerError::MissingMember("macro_image.bin"))?,
            WORDLINES,
        )?,
        wsram_image: rows_from_image(
            &wsram_bytes.ok_or(ContainerError::MissingMember("wsram_image.bin"))?,
            WSRAM_ROWS,
        )?,
        fused,
        unfused,
        unfused_error: manifest.unfused_error,
        stats: manifest.stats,
    })
}
