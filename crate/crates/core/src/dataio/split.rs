use chrono::Datelike;

use super::table::FeatureTable;
use crate::error::{Error, Result};

/// Share of the pre-test days used for fitting; the remainder is validation.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: FeatureTable,
    pub validation: FeatureTable,
    pub test: FeatureTable,
}

impl DatasetSplit {
    pub fn total_len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }
}

/// Splits the first `pretest_days` rows 80/20 into train and validation
/// (validation is the chronologically last part) and uses the rest as test.
pub fn split_by_days(table: &FeatureTable, pretest_days: usize) -> Result<DatasetSplit> {
    if pretest_days < 2 || pretest_days >= table.len() {
        return Err(Error::Data(format!(
            "pre-test span of {pretest_days} days leaves no train/validation/test split of a {}-day table",
            table.len()
        )));
    }
    let n_train = (pretest_days as f64 * TRAIN_FRACTION).floor() as usize;
    let n_train = n_train.clamp(1, pretest_days - 1);
    Ok(DatasetSplit {
        train: table.slice(0, n_train),
        validation: table.slice(n_train, pretest_days),
        test: table.slice(pretest_days, table.len()),
    })
}

/// Years up to and including `train_end_year` become train + validation;
/// `test_year` becomes the test set. Rows between or after are dropped.
pub fn split_dataset(table: &FeatureTable, train_end_year: i32, test_year: i32) -> Result<DatasetSplit> {
    if test_year <= train_end_year {
        return Err(Error::Config(format!(
            "test year {test_year} must come after training end year {train_end_year}"
        )));
    }
    let pretest = table
        .dates
        .iter()
        .take_while(|d| d.year() <= train_end_year)
        .count();
    if pretest == 0 {
        return Err(Error::Data(format!(
            "table starting {} has no days in or before {train_end_year}",
            table.dates.first().map(|d| d.to_string()).unwrap_or_default()
        )));
    }
    let test_start = table.dates.iter().position(|d| d.year() == test_year);
    let Some(test_start) = test_start else {
        return Err(Error::Data(format!("test year {test_year} is absent from the table")));
    };
    let test_end = test_start
        + table.dates[test_start..]
            .iter()
            .take_while(|d| d.year() == test_year)
            .count();
    if pretest < 2 {
        return Err(Error::Data("need at least two pre-test days".into()));
    }
    let n_train = ((pretest as f64 * TRAIN_FRACTION).floor() as usize).clamp(1, pretest - 1);
    Ok(DatasetSplit {
        train: table.slice(0, n_train),
        validation: table.slice(n_train, pretest),
        test: table.slice(test_start, test_end),
    })
}
