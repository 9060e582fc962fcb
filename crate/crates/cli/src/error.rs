use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {key}: {reason}")]
    Config { key: String, reason: String },

    #[error("i/o error: {0}")]
    Io(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn config(key: &str, reason: impl Into<String>) -> Self {
        CliError::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// A config that does not parse is a configuration error; the key
    /// is lifted from the TOML diagnostic when it names one.
    pub fn from_toml(e: &toml::de::Error) -> Self {
        let msg = e.to_string();
        CliError::Config {
            key: key_in(e.message()).unwrap_or_else(|| "toml".into()),
            reason: msg.trim().to_string(),
        }
    }

    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Io(_) | CliError::Format(_) => 3,
            CliError::ShapeMismatch(_) => 4,
            CliError::Runtime(_) => 1,
        }
    }
}

fn key_in(msg: &str) -> Option<String> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(msg[start..start + len].to_string())
}

impl From<skyaoi_core::Error> for CliError {
    fn from(e: skyaoi_core::Error) -> Self {
        use skyaoi_core::Error as E;
        match e {
            E::Config { key, reason } => CliError::Config { key, reason },
            E::ShapeMismatch(m) => CliError::ShapeMismatch(m),
            E::Format(m) => CliError::Format(m),
            E::Json(m) => CliError::Format(m.to_string()),
            E::Io(m) => CliError::Io(m.to_string()),
            E::Contract(m) => CliError::Runtime(m),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
