use std::fmt::Write as _;
use std::ops::Range;

use super::{IngestError, PanelRow, PanelTable, Result, ScalerSet};

/// Encoder inputs per step: the scaled target followed by the known covariates.
pub const ENCODER_FEATURES: [&str; 7] = [
    "target",
    "holiday_flag",
    "temperature",
    "fuel_price",
    "cpi",
    "unemployment",
    "t_idx",
];

/// Decoder inputs per step: known covariates only.
pub const DECODER_FEATURES: [&str; 6] = [
    "holiday_flag",
    "temperature",
    "fuel_price",
    "cpi",
    "unemployment",
    "t_idx",
];

/// One forecasting example anchored at `origin_t`, the last encoder week.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    pub store: u32,
    /// Categorical index of `store` within the source panel.
    pub store_index: usize,
    pub origin_t: u32,
    /// `[encoder_len × ENCODER_FEATURES.len()]`, row-major.
    pub encoder: Vec<f64>,
    /// `[horizon × DECODER_FEATURES.len()]`, row-major.
    pub decoder: Vec<f64>,
    /// Scaled log-sales for the forecast weeks.
    pub target: Vec<f64>,
    /// Observed dollars for the forecast weeks.
    pub actual: Vec<f64>,
}

impl WindowSample {
    /// Scaled target at encoder step `i`.
    pub fn encoder_target(&self, i: usize) -> f64 {
        self.encoder[i * ENCODER_FEATURES.len()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    pub encoder_len: usize,
    pub horizon: usize,
    pub samples: Vec<WindowSample>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, keep: impl Fn(&WindowSample) -> bool) -> WindowSet {
        WindowSet {
            encoder_len: self.encoder_len,
            horizon: self.horizon,
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
        }
    }

    /// `(store, origin_t, horizon step)` for every prediction point, step 1-based.
    pub fn prediction_keys(&self) -> Vec<(u32, u32, usize)> {
        self.samples
            .iter()
            .flat_map(|s| (1..=self.horizon).map(move |h| (s.store, s.origin_t, h)))
            .collect()
    }

    /// Debug export, one row per window.
    ///
    /// Columns: `store,origin_t`, then `enc{step}_{feature}` for every encoder
    /// step and feature (step-major, features in [`ENCODER_FEATURES`] order),
    /// then `dec{step}_{feature}` likewise, then `target{h}` for h = 1..=horizon.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("store,origin_t");
        for t in 0..self.encoder_len {
            for f in ENCODER_FEATURES {
                let _ = write!(out, ",enc{t}_{f}");
            }
        }
        for t in 0..self.horizon {
            for f in DECODER_FEATURES {
                let _ = write!(out, ",dec{t}_{f}");
            }
        }
        for h in 1..=self.horizon {
            let _ = write!(out, ",target{h}");
        }
        out.push('\n');
        for s in &self.samples {
            let _ = write!(out, "{},{}", s.store, s.origin_t);
            for v in s.encoder.iter().chain(&s.decoder).chain(&s.target) {
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
        out
    }
}

fn make_window(
    store_index: usize,
    rows: &[PanelRow],
    origin_pos: usize,
    scalers: &ScalerSet,
    encoder_len: usize,
    horizon: usize,
) -> WindowSample {
    let enc_rows = &rows[origin_pos + 1 - encoder_len..=origin_pos];
    let dec_rows = &rows[origin_pos + 1..=origin_pos + horizon];
    let mut encoder = Vec::with_capacity(encoder_len * ENCODER_FEATURES.len());
    for r in enc_rows {
        encoder.push(scalers.log_sales.apply(r.log_sales));
        encoder.extend_from_slice(&scalers.known_features(r));
    }
    let mut decoder = Vec::with_capacity(horizon * DECODER_FEATURES.len());
    for r in dec_rows {
        decoder.extend_from_slice(&scalers.known_features(r));
    }
    WindowSample {
        store: rows[0].record.store,
        store_index,
        origin_t: rows[origin_pos].t_idx,
        encoder,
        decoder,
        target: dec_rows
            .iter()
            .map(|r| scalers.log_sales.apply(r.log_sales))
            .collect(),
        actual: dec_rows.iter().map(|r| r.record.weekly_sales).collect(),
    }
}

/// Windows whose forecast weeks satisfy `keep(store_index, first_t, last_t)`.
/// Stores too short for any window contribute nothing.
pub fn build_windows_filtered(
    panel: &PanelTable,
    scalers: &ScalerSet,
    encoder_len: usize,
    horizon: usize,
    keep: impl Fn(usize, u32, u32) -> bool,
) -> Result<WindowSet> {
    if encoder_len == 0 || horizon == 0 {
        return Err(IngestError::InvalidArgument(
            "encoder length and horizon must be at least 1".into(),
        ));
    }
    let mut samples = Vec::new();
    for si in 0..panel.stores().len() {
        let rows = panel.store_rows(si);
        if rows.len() < encoder_len + horizon {
            continue;
        }
        for origin in encoder_len - 1..rows.len() - horizon {
            if keep(si, rows[origin + 1].t_idx, rows[origin + horizon].t_idx) {
                samples.push(make_window(si, rows, origin, scalers, encoder_len, horizon));
            }
        }
    }
    Ok(WindowSet {
        encoder_len,
        horizon,
        samples,
    })
}

/// Every window with `encoder_len + horizon` consecutive weeks.
pub fn build_windows(
    panel: &PanelTable,
    scalers: &ScalerSet,
    encoder_len: usize,
    horizon: usize,
) -> Result<WindowSet> {
    for si in 0..panel.stores().len() {
        let weeks = panel.store_rows(si).len();
        if weeks < encoder_len + horizon {
            return Err(IngestError::SeriesTooShort {
                store: panel.stores()[si],
                weeks,
                needed: encoder_len + horizon,
            });
        }
    }
    build_windows_filtered(panel, scalers, encoder_len, horizon, |_, _, _| true)
}

fn split_positions(panel: &PanelTable, train_fraction: f64) -> Result<Vec<usize>> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(IngestError::InvalidArgument(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    (0..panel.stores().len())
        .map(|si| {
            let n = panel.store_rows(si).len();
            let cut = (n as f64 * train_fraction).floor() as usize;
            if cut == 0 || cut == n {
                Err(IngestError::DegenerateSplit {
                    store: panel.stores()[si],
                })
            } else {
                Ok(cut)
            }
        })
        .collect()
}

/// Per-store chronological split: the first `⌊n·fraction⌋` weeks of each
/// store train, the rest are held out.
pub fn chronological_split(
    panel: &PanelTable,
    train_fraction: f64,
) -> Result<(PanelTable, PanelTable)> {
    let cuts = split_positions(panel, train_fraction)?;
    let mut train = Vec::new();
    let mut hold = Vec::new();
    for (si, &cut) in cuts.iter().enumerate() {
        let rows = panel.store_rows(si);
        train.extend_from_slice(&rows[..cut]);
        hold.extend_from_slice(&rows[cut..]);
    }
    Ok((PanelTable::from_rows(train)?, PanelTable::from_rows(hold)?))
}

/// The hold-out protocol: split, scalers fitted on the training rows,
/// training windows entirely inside the training weeks and test windows whose
/// forecast weeks all fall in the hold-out weeks (their encoders may reach
/// back into training weeks).
#[derive(Clone, Debug)]
pub struct HoldoutSplit {
    pub train: PanelTable,
    pub holdout: PanelTable,
    pub scalers: ScalerSet,
    pub train_windows: WindowSet,
    pub test_windows: WindowSet,
}

pub fn holdout_protocol(
    panel: &PanelTable,
    train_fraction: f64,
    encoder_len: usize,
    horizon: usize,
) -> Result<HoldoutSplit> {
    let (train, holdout) = chronological_split(panel, train_fraction)?;
    let scalers = ScalerSet::fit(&train)?;
    let (train_windows, test_windows) =
        holdout_windows(panel, train_fraction, encoder_len, horizon, &scalers)?;
    Ok(HoldoutSplit {
        train,
        holdout,
        scalers,
        train_windows,
        test_windows,
    })
}

/// Training and test windows of the hold-out protocol under given scalers.
pub fn holdout_windows(
    panel: &PanelTable,
    train_fraction: f64,
    encoder_len: usize,
    horizon: usize,
    scalers: &ScalerSet,
) -> Result<(WindowSet, WindowSet)> {
    let cuts = split_positions(panel, train_fraction)?;
    let boundary: Vec<u32> = cuts
        .iter()
        .enumerate()
        .map(|(si, &cut)| panel.store_rows(si)[cut].t_idx)
        .collect();
    let train = build_windows_filtered(panel, scalers, encoder_len, horizon, |si, _, last| {
        last < boundary[si]
    })?;
    let test = build_windows_filtered(panel, scalers, encoder_len, horizon, |si, first, _| {
        first >= boundary[si]
    })?;
    if train.is_empty() || test.is_empty() {
        return Err(IngestError::InsufficientHistory(format!(
            "hold-out protocol produced {} training and {} test windows",
            train.len(),
            test.len()
        )));
    }
    Ok((train, test))
}

/// Window for one store whose encoder ends at `origin_t`.
///
/// Forecast weeks past the end of the data get synthesized known covariates:
/// the holiday flag of the same week one year earlier, the last observed
/// temperature, fuel price, CPI, and unemployment, and the extrapolated
/// `t_idx`. Their targets are 0 and `actual` only covers observed weeks.
pub fn forecast_window(
    panel: &PanelTable,
    scalers: &ScalerSet,
    store_index: usize,
    origin_t: u32,
    encoder_len: usize,
    horizon: usize,
) -> Result<WindowSample> {
    let rows = panel.store_rows(store_index);
    let store = panel.stores()[store_index];
    let pos = rows
        .iter()
        .position(|r| r.t_idx == origin_t)
        .ok_or_else(|| {
            IngestError::InvalidArgument(format!("store {store} has no week with t_idx {origin_t}"))
        })?;
    if pos + 1 < encoder_len {
        return Err(IngestError::InsufficientHistory(format!(
            "store {store} has {} weeks up to t_idx {origin_t}, the encoder needs {encoder_len}",
            pos + 1
        )));
    }
    let last = rows.last().expect("store blocks are non-empty");
    let mut extended: Vec<PanelRow> = rows[pos + 1 - encoder_len..].to_vec();
    for step in 1..=horizon {
        let t = origin_t + step as u32;
        if t <= last.t_idx {
            continue;
        }
        let year_ago = rows.iter().find(|r| r.t_idx + 52 == t);
        let ahead = (t - last.t_idx) as i64;
        let mut record = last.record.clone();
        record.date = last.record.date + chrono::Duration::weeks(ahead);
        record.holiday_flag = year_ago.map_or(0, |r| r.record.holiday_flag);
        extended.push(PanelRow {
            record,
            t_idx: t,
            log_sales: f64::NAN,
        });
    }
    let mut w = make_window(store_index, &extended, encoder_len - 1, scalers, encoder_len, horizon);
    let observed = extended[encoder_len..encoder_len + horizon]
        .iter()
        .take_while(|r| r.log_sales.is_finite())
        .count();
    w.actual.truncate(observed);
    for v in w.target.iter_mut().skip(observed) {
        *v = 0.0;
    }
    Ok(w)
}

/// One expanding-origin fold.
#[derive(Clone, Debug)]
pub struct CvFold {
    /// 1-based fold number.
    pub index: usize,
    /// Global `t_idx` range of the test block.
    pub test_weeks: Range<u32>,
    /// Every row strictly before the test block.
    pub train_rows: PanelTable,
    pub scalers: ScalerSet,
    pub train: WindowSet,
    pub test: WindowSet,
}

/// Expanding-origin chronological folds.
///
/// The first `⌊weeks·burn_in_fraction⌋` weeks are never tested. The remaining
/// weeks are cut into `k` contiguous blocks (sizes differ by at most one,
/// larger blocks first). Fold `i` trains on every week before block `i`, with
/// scalers refitted on those rows, and tests on the windows whose forecast
/// weeks all fall inside block `i`.
pub fn cv_folds(
    panel: &PanelTable,
    k: usize,
    encoder_len: usize,
    horizon: usize,
    burn_in_fraction: f64,
) -> Result<Vec<CvFold>> {
    if k < 2 {
        return Err(IngestError::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    if !(burn_in_fraction > 0.0 && burn_in_fraction < 1.0) {
        return Err(IngestError::InvalidArgument(format!(
            "burn-in fraction {burn_in_fraction} outside (0, 1)"
        )));
    }
    let weeks = panel.max_t_idx() as usize + 1;
    let burn_in = (weeks as f64 * burn_in_fraction).floor() as usize;
    let post = weeks.saturating_sub(burn_in);
    if burn_in < encoder_len + horizon || post < k * horizon {
        return Err(IngestError::InsufficientHistory(format!(
            "{weeks} weeks with burn-in {burn_in} cannot host {k} folds of horizon {horizon} \
             after an encoder of {encoder_len}"
        )));
    }
    let base = post / k;
    let extra = post % k;
    let mut start = burn_in;
    let mut folds = Vec::with_capacity(k);
    for i in 0..k {
        let len = base + usize::from(i < extra);
        let block = start as u32..(start + len) as u32;
        start += len;

        let train_rows = panel.filter(|r| r.t_idx < block.start)?;
        let scalers = ScalerSet::fit(&train_rows)?;
        let train = build_windows_filtered(panel, &scalers, encoder_len, horizon, |_, _, last| {
            last < block.start
        })?;
        let test = build_windows_filtered(panel, &scalers, encoder_len, horizon, |_, first, last| {
            first >= block.start && last < block.end
        })?;
        if train.is_empty() || test.is_empty() {
            return Err(IngestError::InsufficientHistory(format!(
                "fold {} has {} training and {} test windows",
                i + 1,
                train.len(),
                test.len()
            )));
        }
        folds.push(CvFold {
            index: i + 1,
            test_weeks: block,
            train_rows,
            scalers,
            train,
            test,
        });
    }
    Ok(folds)
}
