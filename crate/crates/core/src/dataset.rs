use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::ids::ImageId;

/// Latent difficulty attributes carried by synthetic pages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hardness {
    pub style_cluster: u32,
    pub overlap_prone: bool,
    pub table_count: u32,
}

/// One annotated page.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub image_id: ImageId,
    pub width: u32,
    pub height: u32,
    pub gt_boxes: Vec<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hardness: Option<Hardness>,
}

impl DatasetRecord {
    pub fn validate(&self) -> Result<()> {
        if self.image_id.as_str().is_empty() {
            return Err(Error::config("empty image id"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::config(format!(
                "image `{}` has zero dimension {}x{}",
                self.image_id, self.width, self.height
            )));
        }
        if let Some(b) = self
            .gt_boxes
            .iter()
            .find(|b| !b.within(self.width as f64, self.height as f64))
        {
            return Err(Error::config(format!(
                "image `{}`: box {:?} lies outside {}x{}",
                self.image_id,
                b.to_array(),
                self.width,
                self.height
            )));
        }
        if let Some(h) = &self.hardness {
            if h.table_count as usize != self.gt_boxes.len() {
                return Err(Error::config(format!(
                    "image `{}`: table_count {} disagrees with {} boxes",
                    self.image_id,
                    h.table_count,
                    self.gt_boxes.len()
                )));
            }
        }
        Ok(())
    }
}

/// Ordered collection of records with unique ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    records: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn new(records: Vec<DatasetRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            r.validate()?;
            if !seen.insert(r.image_id.as_str()) {
                return Err(Error::DuplicateId(r.image_id.to_string()));
            }
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[DatasetRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<DatasetRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> Vec<ImageId> {
        self.records.iter().map(|r| r.image_id.clone()).collect()
    }

    pub fn ground_truth(&self) -> HashMap<ImageId, Vec<BoundingBox>> {
        self.records
            .iter()
            .map(|r| (r.image_id.clone(), r.gt_boxes.clone()))
            .collect()
    }

    pub fn has_hardness(&self) -> bool {
        self.records.iter().all(|r| r.hardness.is_some())
    }

    /// Splits off the last `ceil(fraction * len)` records as a held-out set.
    pub fn split_holdout(self, fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::config(format!(
                "holdout fraction must lie in [0, 1), got {fraction}"
            )));
        }
        let n_test = (fraction * self.records.len() as f64).ceil() as usize;
        let mut records = self.records;
        let test = records.split_off(records.len() - n_test);
        Ok((Dataset { records }, Dataset { records: test }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, boxes: Vec<[f64; 4]>) -> DatasetRecord {
        DatasetRecord {
            image_id: id.into(),
            width: 100,
            height: 100,
            gt_boxes: boxes.into_iter().map(|b| b.try_into().unwrap()).collect(),
            hardness: None,
        }
    }

    #[test]
    fn rejects_duplicates_and_out_of_bounds() {
        assert!(matches!(
            Dataset::new(vec![rec("a", vec![]), rec("a", vec![])]),
            Err(Error::DuplicateId(id)) if id == "a"
        ));
        assert!(Dataset::new(vec![rec("a", vec![[0.0, 0.0, 120.0, 10.0]])]).is_err());
        let mut bad = rec("h", vec![[0.0, 0.0, 1.0, 1.0]]);
        bad.hardness = Some(Hardness { style_cluster: 0, overlap_prone: false, table_count: 2 });
        assert!(Dataset::new(vec![bad]).is_err());
    }

    #[test]
    fn holdout_split_sizes() {
        let ds = Dataset::new((0..10).map(|i| rec(&format!("r{i}"), vec![])).collect()).unwrap();
        let (train, test) = ds.clone().split_holdout(0.25).unwrap();
        assert_eq!((train.len(), test.len()), (7, 3));
        assert_eq!(test.records()[0].image_id.as_str(), "r7");
        let (all, none) = ds.split_holdout(0.0).unwrap();
        assert_eq!((all.len(), none.len()), (10, 0));
    }
}
