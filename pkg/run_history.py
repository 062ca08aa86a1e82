"""
Run History Manager - Records each command run and its outcome next to the results.
"""
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

import orjson
import structlog

from config import settings

logger = structlog.get_logger(__name__)


class RunHistoryManager:
    """Manages storage and retrieval of past command runs."""

    def __init__(self, history_file: str = None, max_entries: int = None):
        self.history_file = Path(history_file or settings.RUN_HISTORY_FILE)
        self.max_entries = max_entries or settings.MAX_HISTORY_ENTRIES
        self.ensure_history_file()

    def ensure_history_file(self):
        """Create history file if it doesn't exist."""
        if not self.history_file.exists():
            self.save_history([])

    def load_history(self) -> List[Dict[str, Any]]:
        """Load run history from file."""
        try:
            return orjson.loads(self.history_file.read_bytes())
        except (OSError, orjson.JSONDecodeError) as e:
            logger.warning("❌ Error loading run history", path=str(self.history_file), error=str(e))
            return []

    def save_history(self, history: List[Dict[str, Any]]):
        """Save run history to file."""
        try:
            self.history_file.parent.mkdir(parents=True, exist_ok=True)
            self.history_file.write_bytes(orjson.dumps(history, option=orjson.OPT_INDENT_2, default=str))
        except OSError as e:
            logger.warning("❌ Error saving run history", path=str(self.history_file), error=str(e))

    def add_run(self, result: Dict[str, Any], config_path: Optional[str] = None, seed: Optional[int] = None) -> int:
        """Append one command result; returns its 1-based id."""
        history = self.load_history()
        history.append({
            "timestamp": datetime.now().isoformat(),
            "command": result.get("command"),
            "config": config_path,
            "seed": seed,
            "status": result.get("status"),
            "exit_code": result.get("exit_code"),
            "files": result.get("files", []),
            "summary": result.get("summary", {}),
        })

        # Keep only the most recent runs
        if len(history) > self.max_entries:
            history = history[-self.max_entries:]

        self.save_history(history)
        logger.debug("📝 Run saved to history", run_id=len(history), path=str(self.history_file))
        return len(history)

    def get_recent_runs(self, limit: int = 10) -> List[Dict[str, Any]]:
        history = self.load_history()
        return history[-limit:] if history else []

    def get_run_by_id(self, run_id: int) -> Optional[Dict[str, Any]]:
        """Get a specific run by its ID (1-based index)."""
        history = self.load_history()
        if 1 <= run_id <= len(history):
            return history[run_id - 1]
        return None

    def summarize(self) -> Dict[str, Any]:
        """Counts per command and per status."""
        history = self.load_history()
        by_command: Dict[str, int] = {}
        failed = 0
        for run in history:
            by_command[run.get("command")] = by_command.get(run.get("command"), 0) + 1
            failed += run.get("exit_code") != 0
        return {"total": len(history), "failed": failed, "by_command": by_command}


def create_run_history(output_dir: str) -> RunHistoryManager:
    """History manager storing its file inside ``output_dir``."""
    return RunHistoryManager(str(Path(output_dir) / settings.RUN_HISTORY_FILE))
