//! On-disk formats: versioned JSON documents for packets, models, truths,
//! and scenarios, plus the dataset CSV layout.
//!
//! Floats are serialized as shortest round-trip decimals. The packet
//! checksum is computed over a canonical 17-significant-digit rendering of
//! the numeric payload, so a change of JSON formatting can never silently
//! alter the numbers.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{IcrError, Result};
use crate::loss::LocalDataset;
use crate::model::{ClusterSolution, LossKind, PenaltyFamily, SummaryPacket};

pub const PACKET_VERSION: u32 = 1;
pub const MODEL_VERSION: u32 = 1;

/// Wire form of a summary packet.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PacketFile {
    pub version: u32,
    pub client_id: String,
    pub n: usize,
    pub p: usize,
    pub loss_kind: LossKind,
    pub theta_tilde: Vec<f64>,
    pub grad_tilde: Vec<f64>,
    /// Row-major p x p.
    pub hessian_tilde: Vec<f64>,
    /// FNV-1a-64 of the canonical rendering of (n, p, theta, grad, hessian).
    pub checksum: String,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Canonical decimal rendering: every float at 17 significant digits,
/// fields separated by '|'.
fn canonical_payload(n: usize, p: usize, numbers: &[&[f64]]) -> String {
    let mut out = format!("{n}|{p}");
    for block in numbers {
        for v in *block {
            out.push('|');
            out.push_str(&format!("{v:.16e}"));
        }
    }
    out
}

fn packet_checksum(n: usize, p: usize, theta: &[f64], grad: &[f64], hessian: &[f64]) -> String {
    let payload = canonical_payload(n, p, &[theta, grad, hessian]);
    format!("{:016x}", fnv1a64(payload.as_bytes()))
}

impl PacketFile {
    pub fn from_packet(packet: &SummaryPacket) -> Self {
        let p = packet.dim();
        let theta: Vec<f64> = packet.theta_tilde.iter().copied().collect();
        let grad: Vec<f64> = packet.grad_tilde.iter().copied().collect();
        let mut hessian = Vec::with_capacity(p * p);
        for i in 0..p {
            for j in 0..p {
                hessian.push(packet.hessian_tilde[(i, j)]);
            }
        }
        let checksum = packet_checksum(packet.n, p, &theta, &grad, &hessian);
        Self {
            version: PACKET_VERSION,
            client_id: packet.client_id.clone(),
            n: packet.n,
            p,
            loss_kind: packet.loss_kind,
            theta_tilde: theta,
            grad_tilde: grad,
            hessian_tilde: hessian,
            checksum,
        }
    }

    pub fn into_packet(self) -> Result<SummaryPacket> {
        if self.version != PACKET_VERSION {
            return Err(IcrError::Format(format!(
                "unsupported packet version {}",
                self.version
            )));
        }
        let p = self.p;
        if self.theta_tilde.len() != p
            || self.grad_tilde.len() != p
            || self.hessian_tilde.len() != p * p
        {
            return Err(IcrError::Format(format!(
                "packet '{}' field lengths do not match p = {p}",
                self.client_id
            )));
        }
        let expected = packet_checksum(
            self.n,
            p,
            &self.theta_tilde,
            &self.grad_tilde,
            &self.hessian_tilde,
        );
        if expected != self.checksum {
            return Err(IcrError::Format(format!(
                "packet '{}' checksum mismatch: computed {expected}, stored {}",
                self.client_id, self.checksum
            )));
        }
        SummaryPacket::new(
            self.client_id,
            self.n,
            DVector::from_vec(self.theta_tilde),
            DVector::from_vec(self.grad_tilde),
            DMatrix::from_row_slice(p, p, &self.hessian_tilde),
            self.loss_kind,
        )
    }
}

pub fn write_packet(path: &Path, packet: &SummaryPacket) -> Result<()> {
    write_json(path, &PacketFile::from_packet(packet))
}

pub fn read_packet(path: &Path) -> Result<SummaryPacket> {
    let file: PacketFile = read_json(path)?;
    file.into_packet()
}

/// Fitted model document: the selected penalty levels, the partition, both
/// coefficient matrices, and an echo of the effective configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    pub p: usize,
    pub k: usize,
    pub family: PenaltyFamily,
    pub tau: f64,
    pub nu: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub partition: Vec<Vec<usize>>,
    /// Row-major p x M.
    pub psi: Vec<f64>,
    /// Row-major p x K.
    pub theta_hat: Vec<f64>,
    pub active_set: Vec<usize>,
    pub converged: bool,
    /// Effective settings used to produce this model.
    pub config_echo: serde_json::Value,
}

impl ModelFile {
    pub fn from_solution(
        solution: &ClusterSolution,
        family: PenaltyFamily,
        tau: f64,
        nu: f64,
        lambda1: f64,
        lambda2: f64,
        config_echo: serde_json::Value,
    ) -> Self {
        let p = solution.theta_hat.dim();
        let k = solution.theta_hat.clients();
        let m = solution.psi.ncols();
        let mut psi = Vec::with_capacity(p * m);
        for i in 0..p {
            for j in 0..m {
                psi.push(solution.psi[(i, j)]);
            }
        }
        let mut theta = Vec::with_capacity(p * k);
        for i in 0..p {
            for j in 0..k {
                theta.push(solution.theta_hat.matrix()[(i, j)]);
            }
        }
        Self {
            version: MODEL_VERSION,
            p,
            k,
            family,
            tau,
            nu,
            lambda1,
            lambda2,
            partition: solution.partition.clone(),
            psi,
            theta_hat: theta,
            active_set: solution.active_set.clone(),
            converged: solution.converged,
            config_echo,
        }
    }

    pub fn theta_matrix(&self) -> Result<DMatrix<f64>> {
        if self.theta_hat.len() != self.p * self.k {
            return Err(IcrError::Format("model theta length mismatch".into()));
        }
        Ok(DMatrix::from_row_slice(self.p, self.k, &self.theta_hat))
    }
}

/// Ground truth written next to simulated datasets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthFile {
    pub version: u32,
    pub example_id: u8,
    pub p: usize,
    pub k: usize,
    /// Row-major p x M.
    pub psi_star: Vec<f64>,
    pub partition: Vec<Vec<usize>>,
    /// Signal rows (covariates only).
    pub active: Vec<usize>,
}

impl TruthFile {
    pub fn new(
        example_id: u8,
        psi_star: &DMatrix<f64>,
        partition: &[Vec<usize>],
        active: &[usize],
        clients: usize,
    ) -> Self {
        let (p, m) = psi_star.shape();
        let mut flat = Vec::with_capacity(p * m);
        for i in 0..p {
            for j in 0..m {
                flat.push(psi_star[(i, j)]);
            }
        }
        Self {
            version: 1,
            example_id,
            p,
            k: clients,
            psi_star: flat,
            partition: partition.to_vec(),
            active: active.to_vec(),
        }
    }

    pub fn psi_matrix(&self) -> Result<DMatrix<f64>> {
        let m = self.partition.len();
        if self.psi_star.len() != self.p * m {
            return Err(IcrError::Format("truth psi length mismatch".into()));
        }
        Ok(DMatrix::from_row_slice(self.p, m, &self.psi_star))
    }

    /// Expand to the client-level p x K matrix.
    pub fn theta_star(&self) -> Result<DMatrix<f64>> {
        let psi = self.psi_matrix()?;
        let mut theta = DMatrix::zeros(self.p, self.k);
        for (m, members) in self.partition.iter().enumerate() {
            for &k in members {
                if k >= self.k {
                    return Err(IcrError::Format("truth partition out of range".into()));
                }
                theta.set_column(k, &psi.column(m));
            }
        }
        Ok(theta)
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| IcrError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    serde_json::from_str(&text)
        .map_err(|e| IcrError::Format(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| IcrError::Format(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Dataset CSV layout: header row, first column the response, remaining
/// columns the covariates. The intercept column is added on read.
pub fn write_dataset_csv(path: &Path, data: &LocalDataset) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| IcrError::Format(format!("{}: {e}", path.display())))?;
    let p = data.dim();
    let mut header = vec!["y".to_string()];
    for j in 1..p {
        header.push(format!("x{j}"));
    }
    writer
        .write_record(&header)
        .map_err(|e| IcrError::Format(e.to_string()))?;
    for i in 0..data.n() {
        let mut record = vec![format!("{}", data.response()[i])];
        for j in 1..p {
            record.push(format!("{}", data.design()[(i, j)]));
        }
        writer
            .write_record(&record)
            .map_err(|e| IcrError::Format(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_dataset_csv(path: &Path, loss_kind: LossKind) -> Result<LocalDataset> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| IcrError::Format(format!("{}: {e}", path.display())))?;
    let width = reader
        .headers()
        .map_err(|e| IcrError::Format(e.to_string()))?
        .len();
    if width < 2 {
        return Err(IcrError::Format(
            "dataset needs a response column and at least one covariate".into(),
        ));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| IcrError::Format(e.to_string()))?;
        if record.len() != width {
            return Err(IcrError::Format(format!(
                "ragged csv row {} (got {} fields, expected {width})",
                rows.len() + 2,
                record.len()
            )));
        }
        let parsed: Vec<f64> = record
            .iter()
            .map(|field| {
                field.trim().parse::<f64>().map_err(|_| {
                    IcrError::Format(format!("non-numeric field '{field}'"))
                })
            })
            .collect::<Result<_>>()?;
        rows.push(parsed);
    }
    if rows.is_empty() {
        return Err(IcrError::Format("dataset has no rows".into()));
    }
    let n = rows.len();
    let p = width; // covariates + intercept
    let mut x = DMatrix::zeros(n, p);
    let mut y = DVector::zeros(n);
    for (i, row) in rows.iter().enumerate() {
        y[i] = row[0];
        x[(i, 0)] = 1.0;
        for j in 1..p {
            x[(i, j)] = row[j];
        }
    }
    LocalDataset::new(x, y, loss_kind)
}
