"""
WSGI config for the depo_lab project.

Only used to serve the Django admin, where recorded experiment runs can be
browsed; all experiments run through ``manage.py`` commands.
"""

import os

from django.core.wsgi import get_wsgi_application

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'depo_lab.settings')

application = get_wsgi_application()
