use std::fmt;

/// Coarse error class printed on the final error line and mapped to the
/// exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Config,
    Resolution,
    Validation,
    Data,
    Model,
    Io,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Config,
        Category::Resolution,
        Category::Validation,
        Category::Data,
        Category::Model,
        Category::Io,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Config => "config",
            Category::Resolution => "resolution",
            Category::Validation => "validation",
            Category::Data => "data",
            Category::Model => "model",
            Category::Io => "io",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Category::Config | Category::Validation => 2,
            Category::Resolution => 3,
            Category::Data => 4,
            Category::Model | Category::Io => 1,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn from_core(e: &pairdiff_core::Error) -> Category {
    use pairdiff_core::Error as E;
    match e {
        E::Data(_) => Category::Data,
        E::Io { .. } => Category::Io,
        E::Model(_) => Category::Model,
        _ => Category::Validation,
    }
}

fn from_nets(e: &pairdiff_nets::Error) -> Category {
    use pairdiff_nets::Error as E;
    match e {
        E::Core(c) => from_core(c),
        E::Data(_) => Category::Data,
        E::Io { .. } => Category::Io,
        E::Checkpoint { .. } | E::Tensor(_) => Category::Model,
        E::Parameter { .. } | E::Arity { .. } => Category::Validation,
    }
}

/// An explicit [`Category`] context wins; otherwise the innermost library
/// error decides.
pub fn categorize(err: &anyhow::Error) -> Category {
    if let Some(c) = err.downcast_ref::<Category>() {
        return *c;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<pairdiff_nets::Error>() {
            return from_nets(e);
        }
        if let Some(e) = cause.downcast_ref::<pairdiff_core::Error>() {
            return from_core(e);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return Category::Io;
        }
    }
    Category::Model
}

/// `error[category]: outer: inner: ...` with category markers left out.
pub fn render(err: &anyhow::Error) -> String {
    let parts: Vec<String> = err
        .chain()
        .map(|e| e.to_string())
        .filter(|s| !Category::ALL.iter().any(|c| c.as_str() == s))
        .collect();
    format!("error[{}]: {}", categorize(err), parts.join(": "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::Context;

    #[test]
    fn explicit_category_wins() {
        let e = anyhow::Error::new(pairdiff_core::Error::Data("x".into()))
            .context(Category::Resolution)
            .context("opening dataset");
        assert_eq!(categorize(&e), Category::Resolution);
        assert_eq!(render(&e), "error[resolution]: opening dataset: data error: x");
    }

    #[test]
    fn library_errors_map_to_categories() {
        let e: anyhow::Result<()> = Err(pairdiff_core::Error::Data("empty".into())).context("loading");
        assert_eq!(categorize(&e.unwrap_err()), Category::Data);
        let e = anyhow::Error::new(pairdiff_nets::Error::param("k", "bad"));
        assert_eq!(categorize(&e), Category::Validation);
    }
}
