//! Sources of frozen teacher representations: deterministic synthetic
//! teachers with controlled biases, and binary feature files produced by
//! external extraction tools.

pub mod feature_file;
pub mod synthetic;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::model::{MultiLevelFeatures, TeacherKind, TeacherSpec};
use feature_file::FeatureFileReader;
use synthetic::SyntheticTeacher;

/// One committee member and where its features come from.
pub enum TeacherSource {
    Synthetic(SyntheticTeacher),
    File(FeatureFileReader),
}

pub struct CommitteeMember {
    pub spec: TeacherSpec,
    pub source: TeacherSource,
}

/// An ordered committee of frozen teachers. Order is fixed by the
/// declaration and stable across a run.
pub struct Committee {
    pub members: Vec<CommitteeMember>,
}

impl Committee {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn specs(&self) -> Vec<TeacherSpec> {
        self.members.iter().map(|m| m.spec.clone()).collect()
    }

    /// Features of every member for one image. `sample_index` addresses
    /// file-backed members. Any failure aborts, naming the teacher.
    pub fn forward(
        &self,
        image: &Array3<f64>,
        sample_index: usize,
        levels: &[usize],
    ) -> Result<Vec<MultiLevelFeatures>> {
        if self.members.is_empty() {
            return Err(Error::config("committee must have at least one teacher"));
        }
        let mut out = Vec::with_capacity(self.members.len());
        for member in &self.members {
            let features = match &member.source {
                TeacherSource::Synthetic(t) => t.forward(image, levels),
                TeacherSource::File(r) => r.read_sample(sample_index),
            }
            .map_err(|e| {
                Error::numeric(format!(
                    "teacher {} failed: {e}",
                    member.spec.teacher_id
                ))
            })?;
            features.check_levels(levels)?;
            out.push(features);
        }
        Ok(out)
    }
}

/// Build a spec for a synthetic member.
pub fn synthetic_member(teacher: SyntheticTeacher) -> CommitteeMember {
    let spec = TeacherSpec {
        teacher_id: teacher.spec.teacher_id.clone(),
        channel_dim: teacher.spec.channel_dim,
        grid: teacher.spec.grid,
        kind: TeacherKind::Synthetic,
    };
    CommitteeMember {
        spec,
        source: TeacherSource::Synthetic(teacher),
    }
}

/// Build a member from an opened feature file.
pub fn file_member(reader: FeatureFileReader) -> CommitteeMember {
    let header = reader.header();
    let first = &header.levels[0];
    let spec = TeacherSpec {
        teacher_id: header.teacher_id.clone(),
        channel_dim: first.c,
        grid: crate::grid::Grid::new(first.h, first.w),
        kind: TeacherKind::File,
    };
    CommitteeMember {
        spec,
        source: TeacherSource::File(reader),
    }
}
