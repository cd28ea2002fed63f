//! Runs the guide's code snippets as doc-tests so the book cannot drift from
//! the library.

#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }

    chapter!(introduction, "../../../book/src/introduction.md");
    chapter!(ptx_subset, "../../../book/src/ptx-subset.md");
    chapter!(sandboxing, "../../../book/src/sandboxing.md");
    chapter!(partitioning, "../../../book/src/partitioning.md");
    chapter!(interpreter, "../../../book/src/interpreter.md");
    chapter!(manager, "../../../book/src/manager.md");
    chapter!(scenarios, "../../../book/src/scenarios.md");
    chapter!(cli, "../../../book/src/cli.md");
}
