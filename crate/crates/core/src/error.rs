use std::path::PathBuf;

/// Failure classes surfaced by every stage of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("tiff: {0}")]
    Tiff(#[from] tiff::TiffError),

    #[error("png decode: {0}")]
    PngDecode(#[from] png::DecodingError),

    #[error("png encode: {0}")]
    PngEncode(#[from] png::EncodingError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("unsupported bit depth: {0}")]
    UnsupportedBitDepth(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("cell and guttae masks overlap at {count} pixel(s)")]
    MaskOverlap { count: usize },

    #[error("foreground outside roi at {count} pixel(s)")]
    ForegroundOutsideRoi { count: usize },

    #[error("expected {expected} page(s), found {found}")]
    PageCount { expected: usize, found: usize },

    #[error("roi {width}x{height} is smaller than the {patch}x{patch} patch size")]
    RoiTooSmall {
        width: usize,
        height: usize,
        patch: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("weight file: {0}")]
    Weights(String),

    #[error("non-finite loss at step {step} ({detail})")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("unknown label {0}")]
    UnknownLabel(u32),

    #[error("regions {0} and {1} are not adjacent")]
    NotAdjacent(u32, u32),

    #[error("regions {0} and {1} have different classes; merge requires force")]
    CrossClassMerge(u32, u32),

    #[error("nothing to undo")]
    EmptyHistory,

    #[error("could not reach guttae fraction {target:.1}% (reached {reached:.1}%)")]
    GuttaePlacement { target: f64, reached: f64 },

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    /// Stable machine-readable name of the failure class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io(_) => "io",
            Error::Unreadable { source, .. } => source.kind(),
            Error::Tiff(_) | Error::PngDecode(_) | Error::PngEncode(_) => "codec",
            Error::Json(_) => "json",
            Error::UnsupportedFormat(_) | Error::UnsupportedBitDepth(_) => "unsupported_format",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::MaskOverlap { .. } | Error::ForegroundOutsideRoi { .. } => "invalid_masks",
            Error::PageCount { .. } => "page_count",
            Error::RoiTooSmall { .. } => "roi_too_small",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Empty(_) => "empty_input",
            Error::Weights(_) => "weights",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::UnknownLabel(_) => "unknown_label",
            Error::NotAdjacent(..) => "not_adjacent",
            Error::CrossClassMerge(..) => "cross_class_merge",
            Error::EmptyHistory => "empty_history",
            Error::GuttaePlacement { .. } => "guttae_placement",
            Error::Config(_) => "config",
        }
    }

    /// Process exit status for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "config" | "invalid_argument" => 2,
            "io" => 3,
            "weights" => 4,
            "codec" | "json" | "unsupported_format" | "page_count" => 5,
            "non_finite_loss" => 6,
            _ => 1,
        }
    }

    pub(crate) fn at_path(self, path: impl Into<PathBuf>) -> Error {
        Error::Unreadable {
            path: path.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
