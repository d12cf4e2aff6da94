import pytest

from capvm.config import AclEntry, ConfigError, DeploymentConfig, load_config, parse_config, parse_size
from capvm.errors import Err

TWO = """
# producer and consumer
name = producer
heap_size = 1M
stack_count = 2
stack_size = 32K
program = producer
args = 4096
allow key=pc.*,rights=rw,peer=consumer

name = consumer
heap_size = 512K
program = consumer
"""


def test_parse_two_blocks():
    p, c = parse_config(TWO)
    assert (p.name, p.heap_size, p.stack_count, p.stack_size) == ("producer", 1 << 20, 2, 32 << 10)
    assert p.args == ["4096"]
    assert p.allowed_keys == [AclEntry("pc.*", "rw", "consumer")]
    assert (c.name, c.heap_size, c.stack_count, c.program) == ("consumer", 512 << 10, 4, "consumer")


@pytest.mark.parametrize("text,size", [("4096", 4096), ("4K", 4096), ("4k", 4096), ("1M", 1 << 20), ("0x100", 256)])
def test_parse_size(text, size):
    assert parse_size(text) == size


def test_allow_accepts_spaces():
    (cfg,) = parse_config("name = a\nheap_size = 64K\nallow key=k rights=r peer=b\n")
    assert cfg.allowed_keys == [AclEntry("k", "r", "b")]


def test_acl_matching():
    a = AclEntry("kv.*", "rw", "client")
    assert a.matches("kv.req", "client")
    assert a.matches(b"kv.req", "client")
    assert not a.matches("kv.req", "other")
    assert not a.matches("kx", "client")
    assert AclEntry("k", "r").matches("k", "anyone")


@pytest.mark.parametrize("text,line", [
    ("heap_size = 1M\n", 1),                                   # name must come first
    ("name = a\nheap_size = lots\n", 2),
    ("name = a\nheap_size = 1M\ncolour = blue\n", 3),
    ("name = a\nheap_size = 1M\nallow key=k,rights=x\n", 3),
    ("name = a\nheap_size = 1M\njust words\n", 3),
    ("name = a\nheap_size = 0\n", 1),
    ("name = a\nheap_size = 1M\nstack_count = 0\n", 1),
    ("name = a\nprogram = hello\n", 1),                        # heap_size missing
])
def test_config_errors_carry_line(text, line):
    with pytest.raises(ConfigError) as e:
        parse_config(text, "x.cfg")
    assert e.value.code is Err.CONFIG_INVALID
    assert e.value.line == line
    assert f"x.cfg:{line}:" in str(e.value)


def test_empty_config():
    with pytest.raises(ConfigError):
        parse_config("# nothing\n")


def test_disk_image_relative_to_config(tmp_path):
    cfg_path = tmp_path / "d.cfg"
    cfg_path.write_text("name = d\nheap_size = 64K\ndisk_image = disk.img\n")
    (cfg,) = load_config(str(cfg_path))
    assert cfg.disk_image == str(tmp_path / "disk.img")


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(str(tmp_path / "nope.cfg"))


def test_programs_list():
    cfg = DeploymentConfig("x", 1 << 20, program="iso_a, iso_b")
    assert cfg.programs == ["iso_a", "iso_b"]
