"""Smoke test for the _rade extension module.

Either install it (``pip install --no-build-isolation ./crates/py``) or
build it with ``cargo build -p rade-py``; in the latter case the script
picks up ``target/debug/lib_rade.so`` by itself.
"""

import importlib.util
import json
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
TOY = ROOT / "crates/core/tests/fixtures/toy"


def load_module():
    try:
        import _rade

        return _rade
    except ImportError:
        pass
    for profile in ("debug", "release"):
        built = ROOT / "target" / profile / "lib_rade.so"
        if built.exists():
            tmp = Path(tempfile.mkdtemp())
            shutil.copy(built, tmp / "_rade.so")
            spec = importlib.util.spec_from_file_location("_rade", tmp / "_rade.so")
            mod = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(mod)
            return mod
    sys.exit("_rade not found; run `cargo build -p rade-py` first")


def main():
    rade = load_module()

    assert rade.compare_versions("1.10", "1.9") == 1
    assert rade.compare_versions("2.0", "2.0") == 0
    assert rade.constraint_matches(">=1.0 <2.0", "1.4.2")
    assert not rade.constraint_matches("=1.0", "1.0.1")
    assert rade.sha256_hex(b"") == (
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    )

    manifest = (TOY / "libdemo/1.0/rade.json").read_text()
    rade.canonical_manifest(manifest)
    targets = rade.expand_targets(["x86_64"], ["centos7", "sl6"], ["siteA"], manifest)
    assert targets == ["x86_64-centos7-siteA", "x86_64-sl6-siteA"], targets

    corpus = rade.Corpus.load(str(TOY))
    assert sorted(corpus.ids()) == ["app/1.0", "hello/1.0", "libdemo/1.0"]
    assert corpus.changed_recipes(["libdemo/1.0/build.sh"]) == ["libdemo/1.0"]
    rebuild = corpus.rebuild_set(["libdemo/1.0"])
    assert corpus.build_order(rebuild) == ["libdemo/1.0", "app/1.0"]

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        prefix = tmp / "x86_64/centos7/siteA/hello/1.0"
        (prefix / "bin").mkdir(parents=True)
        text = rade.render_modulefile("hello/1.0", "x86_64-centos7-siteA", str(prefix))
        assert text.startswith("#%Module1.0\n") and f"setenv HELLO_DIR {prefix}" in text

        config = tmp / "rade.config.json"
        config.write_text(json.dumps({
            "corpus_root": str(TOY),
            "workdir": "work",
            "integration_root": "integration",
            "deploy_root": "deploy",
            "repo_path": "repo",
            "matrix": {"arches": ["x86_64"], "oses": ["centos7"], "sites": ["siteA", "siteB"]},
            "width": 2,
        }))
        ok, report = rade.run_event(str(config), "smoke", ["libdemo/1.0/build.sh"])
        assert ok, report
        print(report, end="")

        repo = rade.Repository.open(str(tmp / "repo"))
        revision, _, job = repo.head()
        assert (revision, job) == (1, "smoke")
        assert repo.verify() == []

        cache = rade.SiteCache(str(tmp / "repo"), str(tmp / "site"))
        sync = cache.update()
        assert sync["revision"] == 1 and sync["objects_fetched"] > 0
        assert cache.update() is None
        passed, out = cache.mve(corpus, "app/1.0", "x86_64-centos7-siteB", 60)
        assert passed, out
        print(out.splitlines()[-1])

    print("smoke ok")


if __name__ == "__main__":
    main()
