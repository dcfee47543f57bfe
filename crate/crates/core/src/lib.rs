pub mod autodiff;
pub mod backbone;
pub mod container;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
#[cfg(test)]
mod fixtures;
pub mod instance;
pub mod prompt_bank;
pub mod tokenizer;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};

pub(crate) fn read_text(path: &std::path::Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &std::path::Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}
