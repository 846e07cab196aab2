import tempfile
import unittest
from pathlib import Path

from egofuse.base import Source
from egofuse.config import (
    ConfigError, PipelineConfig, config_from_dict, config_to_dict,
    default_config_dict, load_config, read_config_file
)


class TestDefaults(unittest.TestCase):
    def test_resource_matches_dataclasses(self) -> None:
        self.assertEqual(load_config(), PipelineConfig())
        self.assertEqual(config_from_dict(default_config_dict()), PipelineConfig())

    def test_overlay(self) -> None:
        config = config_from_dict({"doa": {"grid": {"step": 0.5}, "upsample": 1}})
        self.assertEqual(config.doa.grid.step, 0.5)
        self.assertEqual(config.doa.grid.start, -180.0)
        self.assertEqual(config.doa.upsample, 1)
        self.assertEqual(config.doa.segment, 0.25)

    def test_int_to_float(self) -> None:
        config = config_from_dict({"fusion": {"gate": {"radius": 2}}})
        self.assertIsInstance(config.fusion.gate.radius, float)


class TestSharedSettings(unittest.TestCase):
    def test_sources(self) -> None:
        config = config_from_dict({"fusion": {"sources": ["SEG", "audio"], "seg": {"target_threshold": 0.7}}})
        self.assertEqual(config.fusion.sources, frozenset({Source.SEG, Source.AUDIO}))
        self.assertEqual(config.resolver.sources, config.fusion.sources)
        self.assertEqual(config.resolver.seg.target_threshold, 0.7)
        self.assertEqual(config_from_dict({"fusion": {"sources": "sd"}}).fusion.sources, frozenset({Source.SD}))

    def test_rejected_in_resolver(self) -> None:
        with self.assertRaises(ConfigError) as context:
            config_from_dict({"resolver": {"seg": {"hfov": 80}}})
        self.assertEqual(context.exception.key_path, "resolver.seg")


class TestErrors(unittest.TestCase):
    def test_unknown_key(self) -> None:
        with self.assertRaises(ConfigError) as context:
            config_from_dict({"fusion": {"kalman": {"noise": 1.0}}})
        self.assertEqual(context.exception.key_path, "fusion.kalman.noise")
        self.assertEqual(str(context.exception), "fusion.kalman.noise: unknown key")
        with self.assertRaises(ConfigError) as context:
            config_from_dict({"plotting": True})
        self.assertEqual(context.exception.key_path, "plotting")

    def test_invalid_values(self) -> None:
        with self.assertRaises(ConfigError) as context:
            config_from_dict({"fusion": {"sources": ["sd", "lidar"]}})
        self.assertEqual(context.exception.key_path, "fusion.sources")
        with self.assertRaises(ConfigError) as context:
            config_from_dict({"range": {"band": 500}})
        self.assertEqual(context.exception.key_path, "range.band")
        with self.assertRaises(ConfigError) as context:
            config_from_dict({"doa": {"segment": -1.0}})
        self.assertEqual(context.exception.key_path, "doa")
        with self.assertRaises(ConfigError) as context:
            config_from_dict({"doa": "fast"})
        self.assertEqual(context.exception.key_path, "doa")
        with self.assertRaises(ConfigError) as context:
            config_from_dict({"mics": "789"})
        self.assertEqual(context.exception.key_path, "")
        with self.assertRaises(ConfigError):
            config_from_dict({"provider": {"mode": "http"}})


class TestFiles(unittest.TestCase):
    def test_later_files_override(self) -> None:
        with tempfile.TemporaryDirectory() as directory:
            first = Path(directory) / "first.yaml"
            second = Path(directory) / "second.yaml"
            first.write_text("doa:\n  segment: 0.5\n  hop: 0.5\nmics: '3456'\n")
            second.write_text("doa:\n  hop: 0.1\n")
            config = load_config(first, second)
        self.assertEqual(config.doa.segment, 0.5)
        self.assertEqual(config.doa.hop, 0.1)
        self.assertEqual(config.mics, "3456")

    def test_invalid_documents(self) -> None:
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / "config.yaml"
            path.write_text("doa: [unclosed\n")
            with self.assertRaises(ConfigError):
                read_config_file(path)
            path.write_text("- a\n- b\n")
            with self.assertRaises(ConfigError):
                read_config_file(path)
            path.write_text("")
            self.assertDictEqual(read_config_file(path), {})

    def test_dump_reloads(self) -> None:
        config = config_from_dict({"fusion": {"sources": ["seg"]},
                                   "provider": {"token": "secret", "cache_dir": "cache"}})
        data = config_to_dict(config)
        self.assertNotIn("token", data["provider"])
        self.assertNotIn("sources", data["resolver"])
        self.assertListEqual(data["fusion"]["sources"], ["seg"])
        self.assertEqual(config_from_dict(data), config_from_dict({"fusion": {"sources": ["seg"]},
                                                                   "provider": {"cache_dir": "cache"}}))


if __name__ == '__main__':
    unittest.main()
