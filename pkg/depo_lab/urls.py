"""
URL configuration for the depo_lab project.

The only routed surface is the Django admin, used to browse recorded
experiment runs and their artifacts.
"""
from django.contrib import admin
from django.urls import path

urlpatterns = [
    path('admin/', admin.site.urls),
]
