import contextlib
import logging

from sqlalchemy import Engine, create_engine, event
from sqlalchemy.exc import SQLAlchemyError
from sqlalchemy.orm import Session, sessionmaker
from sqlalchemy.pool import StaticPool

from src.entity.models import Base

logger = logging.getLogger(__name__)

IN_MEMORY_URL = "sqlite+pysqlite:///:memory:"


class StoreSessionManager:
    def __init__(self, url: str = IN_MEMORY_URL):
        """
        The __init__ function sets up the engine and sessionmaker backing one namespace store.
        Every simulation run owns its own manager, so in-memory databases are never shared
        between runs.

        :param self: Represent the instance of the class
        :param url: str: SQLAlchemy URL, an in-memory SQLite database by default
        :return: A new instance of the class
        """
        self._engine: Engine | None = create_engine(url, poolclass = StaticPool,
                                                    connect_args = {"check_same_thread": False})
        event.listen(self._engine, "connect", _sqlite_pragmas)
        self._session_maker: sessionmaker = sessionmaker(autoflush = False, expire_on_commit = False,
                                                         bind = self._engine)
        Base.metadata.create_all(self._engine)

    @contextlib.contextmanager
    def session(self):
        """
        The session function yields a session and closes it when the block ends.
        If a SQLAlchemyError escapes the block the session is rolled back and the error re-raised,
        so a failed commit never leaves half-applied writes behind.

        :param self: Represent the instance of the class
        :return: A context manager yielding a Session
        """
        if self._session_maker is None:
            raise Exception("Session is not initialized")
        session: Session = self._session_maker()
        try:
            yield session
        except SQLAlchemyError as err:
            logger.error("store session rolled back: %s", err)
            session.rollback()
            raise
        finally:
            session.close()

    def dispose(self) -> None:
        if self._engine is not None:
            self._engine.dispose()
            self._engine = None
            self._session_maker = None


def _sqlite_pragmas(dbapi_connection, _record) -> None:
    cursor = dbapi_connection.cursor()
    cursor.execute("PRAGMA synchronous=OFF")
    cursor.execute("PRAGMA journal_mode=MEMORY")
    cursor.close()
