//! Trained Gaussian-splat scenes: PLY decoding, covariance reconstruction,
//! visibility scoring and pruning.

pub mod ply;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;
use crate::error::{Error, Result};

use self::ply::{Column, ScalarType};

/// Number of SH coefficients per channel for a given degree.
pub fn sh_coeff_count(degree: u8) -> usize {
    (degree as usize + 1) * (degree as usize + 1)
}

/// One decoded splat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub center: [f64; 3],
    /// Per-axis standard deviations in meters.
    pub scale: [f64; 3],
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub opacity: f64,
    /// `sh[k][channel]`, coefficient 0 is the DC term.
    pub sh: Vec<[f64; 3]>,
    pub visibility: f64,
}

impl Gaussian {
    pub fn center_vec(&self) -> Vector3<f64> {
        Vector3::from(self.center)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(self.rotation)
    }

    fn validate(&self, index: usize) -> Result<()> {
        let bad = |property: &str, reason: String| Error::PlyVertex {
            vertex: index,
            property: property.into(),
            reason,
        };
        if self.scale.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(bad("scale", format!("non-positive scale {:?}", self.scale)));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(bad("opacity", format!("{} outside [0,1]", self.opacity)));
        }
        if !(0.0..=1.0).contains(&self.visibility) {
            return Err(bad("visibility", format!("{} outside [0,1]", self.visibility)));
        }
        let n: f64 = self.rotation.iter().map(|q| q * q).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(bad("rot", format!("quaternion norm {n}")));
        }
        Ok(())
    }
}

pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `Σ = R · diag(scale²) · Rᵀ`.
pub fn covariance_of(g: &Gaussian) -> Matrix3<f64> {
    let r = g.rotation_matrix();
    let d = Matrix3::from_diagonal(&Vector3::from(g.scale.map(|s| s * s)));
    let cov = r * d * r.transpose();
    // exact symmetry
    (cov + cov.transpose()) * 0.5
}

/// Immutable splat scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianField {
    gaussians: Vec<Gaussian>,
    sh_degree: u8,
    source_digest: String,
}

impl GaussianField {
    pub fn new(gaussians: Vec<Gaussian>, sh_degree: u8, source_digest: String) -> Result<Self> {
        if sh_degree > 3 {
            return Err(Error::InvalidInput(format!("sh degree {sh_degree} > 3")));
        }
        let n = sh_coeff_count(sh_degree);
        for (i, g) in gaussians.iter().enumerate() {
            if g.sh.len() != n {
                return Err(Error::PlyVertex {
                    vertex: i,
                    property: "f_rest".into(),
                    reason: format!("{} SH coefficients, degree {sh_degree} needs {n}", g.sh.len()),
                });
            }
            g.validate(i)?;
        }
        Ok(Self {
            gaussians,
            sh_degree,
            source_digest,
        })
    }

    pub fn gaussians(&self) -> &[Gaussian] {
        &self.gaussians
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn sh_degree(&self) -> u8 {
        self.sh_degree
    }

    pub fn source_digest(&self) -> &str {
        &self.source_digest
    }

    /// JSON dump of every decoded value.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Re-emits the field as a 3DGS-style PLY. Scales and opacities go back to
    /// log / logit space as `float`; the already-normalized quaternion is written
    /// as `double` so reparsing reproduces it exactly.
    pub fn to_ply_bytes(&self) -> Vec<u8> {
        let rest = 3 * (sh_coeff_count(self.sh_degree) - 1);
        let rest_names: Vec<String> = (0..rest).map(|i| format!("f_rest_{i}")).collect();
        let mut columns = vec![
            Column { name: "x", ty: ScalarType::F32 },
            Column { name: "y", ty: ScalarType::F32 },
            Column { name: "z", ty: ScalarType::F32 },
            Column { name: "f_dc_0", ty: ScalarType::F32 },
            Column { name: "f_dc_1", ty: ScalarType::F32 },
            Column { name: "f_dc_2", ty: ScalarType::F32 },
        ];
        columns.extend(rest_names.iter().map(|n| Column {
            name: n,
            ty: ScalarType::F32,
        }));
        columns.extend([
            Column { name: "opacity", ty: ScalarType::F32 },
            Column { name: "scale_0", ty: ScalarType::F32 },
            Column { name: "scale_1", ty: ScalarType::F32 },
            Column { name: "scale_2", ty: ScalarType::F32 },
            Column { name: "rot_0", ty: ScalarType::F64 },
            Column { name: "rot_1", ty: ScalarType::F64 },
            Column { name: "rot_2", ty: ScalarType::F64 },
            Column { name: "rot_3", ty: ScalarType::F64 },
        ]);
        let n_rest = sh_coeff_count(self.sh_degree) - 1;
        let rows: Vec<Vec<f64>> = self
            .gaussians
            .iter()
            .map(|g| {
                let mut row = Vec::with_capacity(columns.len());
                row.extend_from_slice(&g.center);
                row.extend_from_slice(&g.sh[0]);
                // f_rest is channel-major: all red coefficients first
                for c in 0..3 {
                    for k in 0..n_rest {
                        row.push(g.sh[k + 1][c]);
                    }
                }
                row.push(logit(g.opacity));
                row.extend(g.scale.iter().map(|s| s.ln()));
                row.extend_from_slice(&g.rotation);
                row
            })
            .collect();
        ply::write(&columns, rows.len(), rows.iter().map(Vec::as_slice))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Decodes a binary little-endian 3DGS PLY. Scales are exponentiated,
/// opacities pass through a sigmoid and quaternions are renormalized.
/// Visibility starts at 1.
pub fn parse_gaussian_ply(bytes: &[u8]) -> Result<GaussianField> {
    let table = ply::parse(bytes)?;
    let col = |name: &str| {
        table
            .column(name)
            .ok_or_else(|| Error::PlyMissingProperty(name.to_string()))
    };
    let pos = [col("x")?, col("y")?, col("z")?];
    let dc = [col("f_dc_0")?, col("f_dc_1")?, col("f_dc_2")?];
    let opacity = col("opacity")?;
    let scale = [col("scale_0")?, col("scale_1")?, col("scale_2")?];
    let rot = [col("rot_0")?, col("rot_1")?, col("rot_2")?, col("rot_3")?];

    let rest_count = table
        .properties
        .iter()
        .filter(|p| p.name.starts_with("f_rest_"))
        .count();
    let sh_degree = match rest_count {
        0 => 0u8,
        9 => 1,
        24 => 2,
        45 => 3,
        n => {
            return Err(Error::PlyHeader(format!(
                "{n} f_rest properties do not match any SH degree"
            )))
        }
    };
    let n_rest = rest_count / 3;
    let rest: Vec<usize> = (0..rest_count)
        .map(|i| col(&format!("f_rest_{i}")))
        .collect::<Result<_>>()?;

    let mut gaussians = Vec::with_capacity(table.count);
    for v in 0..table.count {
        let read = |c: usize| -> Result<f64> {
            let x = table.value(v, c);
            if x.is_finite() {
                Ok(x)
            } else {
                Err(Error::PlyVertex {
                    vertex: v,
                    property: table.properties[c].name.clone(),
                    reason: format!("non-finite value {x}"),
                })
            }
        };
        let center = [read(pos[0])?, read(pos[1])?, read(pos[2])?];
        let mut sh = vec![[0.0; 3]; n_rest + 1];
        for c in 0..3 {
            sh[0][c] = read(dc[c])?;
            for k in 0..n_rest {
                sh[k + 1][c] = read(rest[c * n_rest + k])?;
            }
        }
        let raw_opacity = read(opacity)?;
        let scale = [
            read(scale[0])?.exp(),
            read(scale[1])?.exp(),
            read(scale[2])?.exp(),
        ];
        for (i, s) in scale.iter().enumerate() {
            if !(*s > 0.0) || !s.is_finite() {
                return Err(Error::PlyVertex {
                    vertex: v,
                    property: format!("scale_{i}"),
                    reason: format!("scale {s} after exp is not a positive finite number"),
                });
            }
        }
        let q = [read(rot[0])?, read(rot[1])?, read(rot[2])?, read(rot[3])?];
        let rotation = normalize_quat(q).ok_or_else(|| Error::PlyVertex {
            vertex: v,
            property: "rot".into(),
            reason: "zero quaternion".into(),
        })?;
        gaussians.push(Gaussian {
            center,
            scale,
            rotation,
            opacity: sigmoid(raw_opacity),
            sh,
            visibility: 1.0,
        });
    }
    GaussianField::new(gaussians, sh_degree, sha256_hex(bytes))
}

/// Unit quaternion, or `None` for a zero input. Inputs already unit to
/// within rounding are returned unchanged so normalization is idempotent.
pub fn normalize_quat(q: [f64; 4]) -> Option<[f64; 4]> {
    let n2: f64 = q.iter().map(|v| v * v).sum();
    if !(n2 > 0.0) {
        return None;
    }
    if (n2 - 1.0).abs() <= 4.0 * f64::EPSILON {
        return Some(q);
    }
    let n = n2.sqrt();
    Some(q.map(|v| v / n))
}

/// Pinhole camera, world-to-camera: `x_cam = R · x_world + t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraPose {
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let r = &self.rotation;
        Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        )
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rotation_matrix();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(err <= 1e-6) || !(r.determinant() > 0.0) {
            return Err(Error::InvalidInput(format!(
                "camera rotation is not orthonormal (deviation {err:e})"
            )));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidInput("camera focal lengths must be positive".into()));
        }
        Ok(())
    }

    /// Whether `p` projects inside the image with positive depth.
    pub fn sees(&self, p: &Vector3<f64>) -> bool {
        let c = self.rotation_matrix() * p + Vector3::from(self.translation);
        if c.z <= 0.0 {
            return false;
        }
        let u = self.fx * c.x / c.z + self.cx;
        let v = self.fy * c.y / c.z + self.cy;
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }
}

/// Minimum opacity for a Gaussian to count as contributing to a view.
pub const VISIBILITY_MIN_OPACITY: f64 = 0.01;

/// Fraction of cameras that see each center (positive depth, inside the
/// image, opacity above [`VISIBILITY_MIN_OPACITY`]). Without cameras every
/// visibility is 1.
pub fn estimate_visibility(field: &GaussianField, cameras: &[CameraPose]) -> Result<GaussianField> {
    for cam in cameras {
        cam.validate()?;
    }
    let m = cameras.len();
    let gaussians = field
        .gaussians
        .iter()
        .map(|g| {
            let visibility = if m == 0 {
                1.0
            } else if g.opacity <= VISIBILITY_MIN_OPACITY {
                0.0
            } else {
                let c = g.center_vec();
                cameras.iter().filter(|cam| cam.sees(&c)).count() as f64 / m as f64
            };
            Gaussian {
                visibility,
                ..g.clone()
            }
        })
        .collect();
    Ok(GaussianField {
        gaussians,
        ..field.clone()
    })
}

/// Keeps `{i : αᵢ ≥ alpha_min ∧ vᵢ ≥ v_min}` in input order.
pub fn prune(field: &GaussianField, alpha_min: f64, v_min: f64) -> GaussianField {
    let gaussians = field
        .gaussians
        .iter()
        .filter(|g| g.opacity >= alpha_min && g.visibility >= v_min)
        .cloned()
        .collect();
    GaussianField {
        gaussians,
        sh_degree: field.sh_degree,
        source_digest: field.source_digest.clone(),
    }
}

#[cfg(test)]
mod tests;
