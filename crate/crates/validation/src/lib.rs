//! Holds the `acceptance` test target, which runs the full experiment suite
//! and prints one PASS/FAIL line per criterion. It lives in its own package
//! so the cheaper suites of the other crates run first.
