from pathlib import Path
import shutil
import subprocess

# Define paths
PROJECT_ROOT: Path = Path(__file__).resolve().parent.parent
DIST_DIR: Path = PROJECT_ROOT / "dist"

# Clean build directory
if DIST_DIR.exists():
    shutil.rmtree(DIST_DIR)
DIST_DIR.mkdir(parents=True, exist_ok=True)

# Build executables
BUILD_TARGETS = [
    ("slider_quant/__main__.py", "slider_quant"),
]

for script, exe_name in BUILD_TARGETS:
    cmd = [
        "pyinstaller",
        "--onefile",
        "--name", exe_name,
        "--distpath", str(DIST_DIR),
        "--paths", str(PROJECT_ROOT),
        str(PROJECT_ROOT / script)
    ]
    subprocess.run(cmd, check=True)

# Configs and the bundled corpus ship next to the executable
for folder in ("configs", "data"):
    shutil.copytree(PROJECT_ROOT / folder, DIST_DIR / folder, dirs_exist_ok=True)

print(f"Build complete! Check the '{DIST_DIR}' directory.")
